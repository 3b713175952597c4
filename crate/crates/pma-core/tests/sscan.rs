use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pma_core::gradcheck::grad_check;
use pma_core::graph::Graph;
use pma_core::param::Param;
use pma_core::scan::{reference_scan, zoh_discretize, Discretization, MambaBlockParams};
use pma_core::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + rng.gen::<f64>() * (hi - lo)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, rows: usize) -> Tensor {
    let data = (0..rows).map(|_| 0.05 + rng.gen::<f64>()).collect();
    Tensor::new(vec![rows, 1], data).unwrap()
}

#[test]
fn zoh_at_zero_decay_is_identity_and_full_pass() {
    let (a_bar, b_bar) = zoh_discretize(0.0, 1.0, 1.0).unwrap();
    assert_eq!(a_bar, 1.0);
    assert_eq!(b_bar, 1.0);
}

#[test]
fn zoh_closed_form_values() {
    let (a_bar, b_bar) = zoh_discretize(-1.0, 0.5, 2.0).unwrap();
    assert!((a_bar - 0.606531).abs() < 1e-6);
    assert!((b_bar - 0.786939).abs() < 1e-6);
    // Closed form recomputed independently.
    assert!((a_bar - (-0.5f64).exp()).abs() < 1e-15);
    assert!((b_bar - ((-0.5f64).exp() - 1.0) / -1.0 * 2.0).abs() < 1e-15);
}

#[test]
fn zoh_vanishing_delta_limits() {
    let (a_bar, b_bar) = zoh_discretize(-1.0, 1e-10, 1.0).unwrap();
    assert!((a_bar - 1.0).abs() < 1e-9);
    assert!(b_bar.abs() < 1e-9);
}

#[test]
fn zoh_rejects_nonpositive_delta() {
    assert!(zoh_discretize(-1.0, 0.0, 1.0).is_err());
    assert!(zoh_discretize(-1.0, -0.5, 1.0).is_err());
}

#[test]
fn scan_reduces_to_prefix_sum() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
    let delta = g.leaf(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
    let b = g.leaf(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
    let c = g.leaf(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
    let a = g.leaf(Tensor::vector(vec![0.0]));
    let d = g.leaf(Tensor::vector(vec![0.0]));
    let y = g
        .selective_scan(x, delta, b, c, a, d, None, Discretization::ZohExact)
        .unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 3.0, 6.0]);
}

#[test]
fn scan_zero_prompt_equals_absent_prompt_bitwise() {
    let mut r = rng(101);
    let (t, e, s) = (9, 3, 4);
    let x = rand_tensor(&mut r, &[t, e], -2.0, 2.0);
    let delta = positive_tensor(&mut r, t);
    let b = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let a = rand_tensor(&mut r, &[s], -2.0, -0.1);
    let d = rand_tensor(&mut r, &[e], -1.0, 1.0);

    let run = |prompt: Option<Tensor>| {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let dn = g.leaf(delta.clone());
        let bn = g.leaf(b.clone());
        let cn = g.leaf(c.clone());
        let an = g.leaf(a.clone());
        let ddn = g.leaf(d.clone());
        let pn = prompt.map(|p| g.leaf(p));
        let y = g
            .selective_scan(xn, dn, bn, cn, an, ddn, pn, Discretization::ZohExact)
            .unwrap();
        g.value(y).clone()
    };
    let absent = run(None);
    let zeroed = run(Some(Tensor::zeros(&[t, s])));
    assert!(absent.bit_eq(&zeroed));
}

#[test]
fn scan_matches_dense_oracle() {
    let mut r = rng(103);
    for &(t, e, s) in &[(1usize, 1usize, 1usize), (5, 2, 3), (17, 4, 8), (64, 3, 8)] {
        for scheme in [Discretization::ZohExact, Discretization::Euler] {
            let x = rand_tensor(&mut r, &[t, e], -2.0, 2.0);
            let delta = positive_tensor(&mut r, t);
            let b = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
            let c = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
            let a = rand_tensor(&mut r, &[s], -2.0, -0.1);
            let d = rand_tensor(&mut r, &[e], -1.0, 1.0);
            let p = rand_tensor(&mut r, &[t, s], -1.0, 1.0);

            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let dn = g.leaf(delta.clone());
            let bn = g.leaf(b.clone());
            let cn = g.leaf(c.clone());
            let an = g.leaf(a.clone());
            let ddn = g.leaf(d.clone());
            let pn = g.leaf(p.clone());
            let y = g
                .selective_scan(xn, dn, bn, cn, an, ddn, Some(pn), scheme)
                .unwrap();
            let oracle = reference_scan(&x, &delta, &b, &c, &a, &d, Some(&p), scheme).unwrap();
            let diff = g.value(y).max_abs_diff(&oracle);
            assert!(diff <= 1e-9, "T={t} E={e} S={s} {scheme:?}: {diff}");
        }
    }
}

#[test]
fn scan_is_causal() {
    let mut r = rng(107);
    let (t, e, s) = (12, 2, 3);
    let x = rand_tensor(&mut r, &[t, e], -2.0, 2.0);
    let delta = positive_tensor(&mut r, t);
    let b = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let a = rand_tensor(&mut r, &[s], -2.0, -0.1);
    let d = rand_tensor(&mut r, &[e], -1.0, 1.0);

    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let dn = g.leaf(delta.clone());
        let bn = g.leaf(b.clone());
        let cn = g.leaf(c.clone());
        let an = g.leaf(a.clone());
        let ddn = g.leaf(d.clone());
        let y = g
            .selective_scan(xn, dn, bn, cn, an, ddn, None, Discretization::ZohExact)
            .unwrap();
        g.value(y).clone()
    };
    let base = run(&x);
    for pos in 0..t {
        let mut bumped = x.clone();
        let mut data = bumped.data().to_vec();
        data[pos * e] += 0.37;
        bumped = Tensor::new(vec![t, e], data).unwrap();
        let out = run(&bumped);
        for earlier in 0..pos {
            for ch in 0..e {
                assert_eq!(
                    base.get2(earlier, ch).to_bits(),
                    out.get2(earlier, ch).to_bits(),
                    "perturbing t={pos} leaked into t={earlier}"
                );
            }
        }
    }
}

#[test]
fn scan_stays_bounded_over_long_sequences() {
    let mut r = rng(109);
    let (t, e, s) = (4096, 2, 4);
    let x = rand_tensor(&mut r, &[t, e], -2.0, 2.0);
    let delta = positive_tensor(&mut r, t);
    let b = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let a = rand_tensor(&mut r, &[s], -3.0, -0.05);
    let d = rand_tensor(&mut r, &[e], -1.0, 1.0);
    // Every decay factor lies strictly inside the unit interval.
    for &av in a.data() {
        for &dv in delta.data() {
            let (a_bar, _) = zoh_discretize(av, dv, 1.0).unwrap();
            assert!(a_bar > 0.0 && a_bar < 1.0);
        }
    }
    let mut g = Graph::new();
    let xn = g.leaf(x);
    let dn = g.leaf(delta);
    let bn = g.leaf(b);
    let cn = g.leaf(c);
    let an = g.leaf(a);
    let ddn = g.leaf(d);
    let y = g
        .selective_scan(xn, dn, bn, cn, an, ddn, None, Discretization::ZohExact)
        .unwrap();
    let v = g.value(y);
    assert!(v.all_finite());
    let max = v.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(max < 1e3, "unexpected blow-up: {max}");
}

#[test]
fn scan_prompt_enters_affinely() {
    let mut r = rng(113);
    let (t, e, s) = (8, 2, 5);
    let x = rand_tensor(&mut r, &[t, e], -2.0, 2.0);
    let delta = positive_tensor(&mut r, t);
    let b = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let a = rand_tensor(&mut r, &[s], -2.0, -0.1);
    let d = rand_tensor(&mut r, &[e], -1.0, 1.0);
    let p1 = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let p2 = rand_tensor(&mut r, &[t, s], -1.0, 1.0);
    let p12 = {
        let data = p1.data().iter().zip(p2.data()).map(|(u, v)| u + v).collect();
        Tensor::new(vec![t, s], data).unwrap()
    };

    let run = |prompt: &Tensor| {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let dn = g.leaf(delta.clone());
        let bn = g.leaf(b.clone());
        let cn = g.leaf(c.clone());
        let an = g.leaf(a.clone());
        let ddn = g.leaf(d.clone());
        let pn = g.leaf(prompt.clone());
        let y = g
            .selective_scan(xn, dn, bn, cn, an, ddn, Some(pn), Discretization::ZohExact)
            .unwrap();
        g.value(y).clone()
    };
    let y12 = run(&p12);
    let y2 = run(&p2);
    let y1 = run(&p1);
    let y0 = run(&Tensor::zeros(&[t, s]));
    for i in 0..t * e {
        let lhs = y12.data()[i] - y2.data()[i];
        let rhs = y1.data()[i] - y0.data()[i];
        assert!((lhs - rhs).abs() < 1e-12, "at {i}: {lhs} vs {rhs}");
    }
}

#[test]
fn scan_single_step_closed_form() {
    let mut r = rng(127);
    let (e, s) = (3, 4);
    let x = rand_tensor(&mut r, &[1, e], -2.0, 2.0);
    let delta = positive_tensor(&mut r, 1);
    let b = rand_tensor(&mut r, &[1, s], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[1, s], -1.0, 1.0);
    let a = rand_tensor(&mut r, &[s], -2.0, -0.1);
    let d = rand_tensor(&mut r, &[e], -1.0, 1.0);
    let p = rand_tensor(&mut r, &[1, s], -1.0, 1.0);

    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let dn = g.leaf(delta.clone());
    let bn = g.leaf(b.clone());
    let cn = g.leaf(c.clone());
    let an = g.leaf(a.clone());
    let ddn = g.leaf(d.clone());
    let pn = g.leaf(p.clone());
    let y = g
        .selective_scan(xn, dn, bn, cn, an, ddn, Some(pn), Discretization::ZohExact)
        .unwrap();

    for ch in 0..e {
        // h_1 = b_bar·x_1, y_1 = (c+p)·h_1 + d·x_1 with b_bar from the exact
        // formula (exp(a·delta) − 1)/a · b.
        let mut dot = 0.0;
        for k in 0..s {
            let av = a.data()[k];
            let b_bar = ((av * delta.item()).exp() - 1.0) / av * b.get2(0, k);
            dot += (c.get2(0, k) + p.get2(0, k)) * b_bar * x.get2(0, ch);
        }
        let expect = dot + d.data()[ch] * x.get2(0, ch);
        assert!((g.value(y).get2(0, ch) - expect).abs() < 1e-12);
    }
}

#[test]
fn scan_rejects_length_mismatch() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[4, 2]));
    let delta = g.leaf(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
    let b = g.leaf(Tensor::zeros(&[4, 3]));
    let c = g.leaf(Tensor::zeros(&[4, 3]));
    let a = g.leaf(Tensor::vector(vec![-1.0, -1.0, -1.0]));
    let d = g.leaf(Tensor::vector(vec![0.0, 0.0]));
    assert!(g
        .selective_scan(x, delta, b, c, a, d, None, Discretization::ZohExact)
        .is_err());
}

#[test]
fn mamba_block_preserves_shape() {
    let mut r = rng(131);
    for &(t, d_tok) in &[(1usize, 4usize), (7, 8), (20, 16)] {
        let block = MambaBlockParams::new(
            "blk",
            d_tok,
            2 * d_tok,
            4,
            4,
            None,
            Discretization::ZohExact,
            &mut r,
        );
        let mut g = Graph::new();
        let u = g.leaf(rand_tensor(&mut r, &[t, d_tok], -1.0, 1.0));
        let y = block.forward(&mut g, u, None).unwrap();
        assert_eq!(g.value(y).shape(), &[t, d_tok]);
    }
}

#[test]
fn mamba_block_with_zero_out_projection_is_identity() {
    let mut r = rng(137);
    let block = MambaBlockParams::new(
        "blk",
        8,
        16,
        4,
        4,
        None,
        Discretization::ZohExact,
        &mut r,
    );
    block.out_proj.set_value(Tensor::zeros(&[16, 8]));
    let input = rand_tensor(&mut r, &[6, 8], -1.0, 1.0);
    let mut g = Graph::new();
    let u = g.leaf(input.clone());
    let y = block.forward(&mut g, u, None).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn mamba_block_gradients_pass_finite_differences() {
    let mut r = rng(139);
    let block = MambaBlockParams::new(
        "blk",
        8,
        16,
        4,
        4,
        Some(6),
        Discretization::ZohExact,
        &mut r,
    );
    let input = rand_tensor(&mut r, &[6, 8], -1.0, 1.0);
    let prompt = Param::new("prompt", rand_tensor(&mut r, &[6, 6], -0.5, 0.5), true);
    let readout = rand_tensor(&mut r, &[6, 8], -1.0, 1.0);
    let mut params = block.params();
    params.push(prompt.clone());
    let report = grad_check(
        |g| {
            let u = g.leaf(input.clone());
            let p = g.param(&prompt);
            let y = block.forward(g, u, Some(p))?;
            let w = g.leaf(readout.clone());
            let weighted = g.mul(y, w)?;
            g.sum_all(weighted)
        },
        &params,
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
    assert_eq!(report.params.len(), 12); // 10 block params + prompt_adapt + prompt
}

#[test]
fn euler_discretization_differs_from_exact() {
    let mut r = rng(149);
    let exact = MambaBlockParams::new(
        "blk",
        8,
        16,
        4,
        4,
        None,
        Discretization::ZohExact,
        &mut r,
    );
    let euler = exact.clone().with_scheme(Discretization::Euler);
    let input = rand_tensor(&mut r, &[6, 8], -1.0, 1.0);
    let mut g1 = Graph::new();
    let u1 = g1.leaf(input.clone());
    let y1 = exact.forward(&mut g1, u1, None).unwrap();
    let mut g2 = Graph::new();
    let u2 = g2.leaf(input.clone());
    let y2 = euler.forward(&mut g2, u2, None).unwrap();
    assert!(g1.value(y1).max_abs_diff(g2.value(y2)) > 1e-9);
}
