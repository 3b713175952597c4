//! Gate-prompt generator: unique-index assignment against an independent
//! oracle, distribution properties, prompt projection degeneracies, row
//! equivariance, and the shared-parameter contract.

use pma_core::gate_prompt::{assign_unique_indices, g2pg_forward, prompt_projection, G2pgParams};
use pma_core::geometry::PointSet;
use pma_core::gradcheck::{grad_check, ParamStatus};
use pma_core::graph::Graph;
use pma_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_distribution(rng: &mut ChaCha8Rng, m: usize, s: usize) -> Tensor {
    let mut data = Vec::with_capacity(m * s);
    for _ in 0..m {
        let raw: Vec<f64> = (0..s).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let sum: f64 = raw.iter().sum();
        data.extend(raw.into_iter().map(|v| v / sum));
    }
    Tensor::new(vec![m, s], data).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> PointSet {
    let coords: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PointSet::new(Tensor::new(vec![n, 3], coords).unwrap()).unwrap()
}

fn test_params(rng: &mut ChaCha8Rng, d_tok: usize, m: usize, s_state: usize) -> G2pgParams {
    G2pgParams::new("g", d_tok, d_tok / 4, m, s_state, 4, rng)
}

/// Same assignment rule, organized differently: every token scans all bins
/// and takes the free one minimizing (distance, bin) lexicographically.
fn oracle_assign(dist: &Tensor) -> Vec<usize> {
    let m = dist.rows();
    let s = dist.cols();
    let mut toks: Vec<(usize, usize, f64)> = (0..m)
        .map(|t| {
            let row = dist.row(t);
            let mut best = 0;
            for j in 1..s {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (t, best, row[best])
        })
        .collect();
    toks.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut free = vec![true; s];
    let mut bin_of = vec![usize::MAX; m];
    for (t, pref, _) in toks {
        let mut best: Option<(usize, usize)> = None;
        for (b, &is_free) in free.iter().enumerate() {
            if is_free {
                let d = b.abs_diff(pref);
                if best.map_or(true, |prev| (d, b) < prev) {
                    best = Some((d, b));
                }
            }
        }
        let (_, b) = best.unwrap();
        free[b] = false;
        bin_of[t] = b;
    }
    let mut pairs: Vec<(usize, usize)> = bin_of.iter().enumerate().map(|(t, &b)| (b, t)).collect();
    pairs.sort_unstable();
    pairs.into_iter().map(|(_, t)| t).collect()
}

fn is_permutation(order: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n
        && order.iter().all(|&i| {
            if i < n && !seen[i] {
                seen[i] = true;
                true
            } else {
                false
            }
        })
}

#[test]
fn assign_distinct_argmaxes_sorts_tokens_by_bin() {
    let dist = Tensor::from_rows(&[
        vec![0.1, 0.1, 0.1, 0.7],
        vec![0.7, 0.1, 0.1, 0.1],
        vec![0.1, 0.1, 0.7, 0.1],
    ])
    .unwrap();
    assert_eq!(assign_unique_indices(&dist).unwrap(), vec![1, 2, 0]);
}

#[test]
fn assign_collision_prefers_higher_probability_then_nearest_free_bin() {
    // Both rows prefer bin 3; the 0.9 row wins it, the other falls to bin 2.
    let dist = Tensor::from_rows(&[
        vec![0.05, 0.03, 0.02, 0.9],
        vec![0.1, 0.05, 0.05, 0.8],
    ])
    .unwrap();
    assert_eq!(assign_unique_indices(&dist).unwrap(), vec![1, 0]);
}

#[test]
fn assign_breaks_distance_ties_toward_lower_bin() {
    // Three tokens all prefer bin 2 of five; the fallback order must be
    // bin 2, then bin 1 (lower side first), then bin 3.
    let dist = Tensor::from_rows(&[
        vec![0.02, 0.02, 0.9, 0.03, 0.03],
        vec![0.05, 0.05, 0.8, 0.05, 0.05],
        vec![0.1, 0.05, 0.7, 0.05, 0.1],
    ])
    .unwrap();
    // Bins: token0 -> 2, token1 -> 1, token2 -> 3.
    assert_eq!(assign_unique_indices(&dist).unwrap(), vec![1, 0, 2]);
}

#[test]
fn assign_breaks_probability_ties_toward_lower_token() {
    // Equal argmax probabilities: token 0 is processed first and keeps the
    // shared preferred bin.
    let dist = Tensor::from_rows(&[vec![0.4, 0.6, 0.0], vec![0.4, 0.6, 0.0]]).unwrap();
    // token0 -> bin 1, token1 -> bin 0 (nearest free below).
    assert_eq!(assign_unique_indices(&dist).unwrap(), vec![1, 0]);
}

#[test]
fn assign_rejects_fewer_bins_than_tokens() {
    let dist = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    assert!(matches!(
        assign_unique_indices(&dist),
        Err(Error::InvalidArgument { .. })
    ));
}

#[test]
fn assign_matches_independent_oracle_on_random_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..500 {
        let m = rng.gen_range(1..=8);
        let dist = random_distribution(&mut rng, m, m);
        let got = assign_unique_indices(&dist).unwrap();
        assert!(is_permutation(&got, m), "trial {trial}");
        assert_eq!(got, oracle_assign(&dist), "trial {trial}");
    }
}

#[test]
fn assign_collision_free_rows_keep_their_argmax_bins() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let m = rng.gen_range(2..=16);
        let s = m + rng.gen_range(0..=4);
        // Plant distinct argmax bins on otherwise small random rows.
        let mut bins: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            let j = rng.gen_range(0..=i);
            bins.swap(i, j);
        }
        let mut rows = Vec::with_capacity(m);
        for t in 0..m {
            let mut row: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..0.4)).collect();
            row[bins[t]] = 0.5 + rng.gen_range(0.0..0.5);
            rows.push(row);
        }
        let dist = Tensor::from_rows(&rows).unwrap();
        let order = assign_unique_indices(&dist).unwrap();
        // No collisions, so sorting tokens by their own argmax reproduces it.
        let mut expect: Vec<usize> = (0..m).collect();
        expect.sort_by_key(|&t| bins[t]);
        assert_eq!(order, expect);
    }
}

proptest! {
    #[test]
    fn assign_is_always_a_bijection(
        m in 1usize..=64,
        extra in 0usize..=8,
        seed in 0u64..512,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = random_distribution(&mut rng, m, m + extra);
        let order = assign_unique_indices(&dist).unwrap();
        prop_assert!(is_permutation(&order, m));
    }
}

#[test]
fn forward_output_shapes_match_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = test_params(&mut rng, 48, 32, 16);
    let centers = random_points(&mut rng, 32);
    let tokens = random_distribution(&mut rng, 32, 48);
    let mut g = Graph::new();
    let t = g.leaf(tokens);
    let out = g2pg_forward(&mut g, t, &centers, &params).unwrap();
    assert_eq!(g.value(out.distribution).shape(), &[32, 32]);
    assert_eq!(g.value(out.prompt).shape(), &[32, 16]);
    assert_eq!(out.order.len(), 32);
    assert!(is_permutation(&out.order, 32));
}

#[test]
fn forward_distribution_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = test_params(&mut rng, 16, 12, 8);
    let centers = random_points(&mut rng, 12);
    let tokens = random_distribution(&mut rng, 12, 16);
    let mut g = Graph::new();
    let t = g.leaf(tokens);
    let out = g2pg_forward(&mut g, t, &centers, &params).unwrap();
    let dist = g.value(out.distribution).clone();
    for i in 0..dist.rows() {
        let sum: f64 = dist.row(i).iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
    }
}

#[test]
fn forward_zero_projections_give_uniform_rows_and_identity_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = test_params(&mut rng, 16, 12, 8);
    params.down_w.set_value(Tensor::zeros(&[16, 4]));
    params.up_w.set_value(Tensor::zeros(&[4, 12]));
    let centers = random_points(&mut rng, 12);
    let tokens = random_distribution(&mut rng, 12, 16);
    let mut g = Graph::new();
    let t = g.leaf(tokens);
    let out = g2pg_forward(&mut g, t, &centers, &params).unwrap();

    let dist = g.value(out.distribution).clone();
    for &v in dist.data() {
        assert!((v - 1.0 / 12.0).abs() <= 1e-15);
    }
    let identity: Vec<usize> = (0..12).collect();
    assert_eq!(out.order, identity);

    // The prompt must be exactly the projection of the uniform matrix.
    let uniform = g.leaf(dist);
    let expect = prompt_projection(&mut g, uniform, &params).unwrap();
    assert!(g.value(out.prompt).bit_eq(g.value(expect)));
}

#[test]
fn forward_rejects_bad_neighbor_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = test_params(&mut rng, 8, 6, 4);
    let centers = random_points(&mut rng, 6);
    let tokens = random_distribution(&mut rng, 6, 8);

    params.k = 7;
    let mut g = Graph::new();
    let t = g.leaf(tokens.clone());
    assert!(matches!(
        g2pg_forward(&mut g, t, &centers, &params),
        Err(Error::InvalidArgument { .. })
    ));

    params.k = 0;
    let mut g = Graph::new();
    let t = g.leaf(tokens);
    assert!(matches!(
        g2pg_forward(&mut g, t, &centers, &params),
        Err(Error::InvalidArgument { .. })
    ));
}

#[test]
fn forward_rejects_token_center_count_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = test_params(&mut rng, 8, 6, 4);
    let centers = random_points(&mut rng, 6);
    let tokens = random_distribution(&mut rng, 5, 8);
    let mut g = Graph::new();
    let t = g.leaf(tokens);
    assert!(matches!(
        g2pg_forward(&mut g, t, &centers, &params),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn forward_is_row_equivariant_under_joint_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let m = 10;
    let params = test_params(&mut rng, 12, m, 6);
    let centers = random_points(&mut rng, m);
    let tokens = random_distribution(&mut rng, m, 12);
    let perm = [3usize, 1, 7, 0, 9, 5, 2, 8, 4, 6];

    let mut g = Graph::new();
    let t = g.leaf(tokens.clone());
    let base = g2pg_forward(&mut g, t, &centers, &params).unwrap();
    let base_dist = g.value(base.distribution).clone();

    let tok_rows: Vec<Vec<f64>> = perm.iter().map(|&i| tokens.row(i).to_vec()).collect();
    let ctr_rows: Vec<Vec<f64>> = perm
        .iter()
        .map(|&i| centers.tensor().row(i).to_vec())
        .collect();
    let permuted_centers = PointSet::new(Tensor::from_rows(&ctr_rows).unwrap()).unwrap();
    let mut g2 = Graph::new();
    let t2 = g2.leaf(Tensor::from_rows(&tok_rows).unwrap());
    let permuted = g2pg_forward(&mut g2, t2, &permuted_centers, &params).unwrap();
    let perm_dist = g2.value(permuted.distribution).clone();

    for (i, &src) in perm.iter().enumerate() {
        assert_eq!(perm_dist.row(i), base_dist.row(src), "row {i}");
    }
}

#[test]
fn prompt_projection_degenerates_to_zero_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    // S_prompt == S_state so the identity map is expressible.
    let params = G2pgParams::new("g", 8, 2, 6, 6, 2, &mut rng);
    let dist = random_distribution(&mut rng, 6, 6);

    params.prompt_w.set_value(Tensor::zeros(&[6, 6]));
    let mut g = Graph::new();
    let d = g.leaf(dist.clone());
    let zeroed = prompt_projection(&mut g, d, &params).unwrap();
    assert!(g.value(zeroed).data().iter().all(|&v| v == 0.0));

    let mut eye = vec![0.0; 36];
    for i in 0..6 {
        eye[i * 6 + i] = 1.0;
    }
    params
        .prompt_w
        .set_value(Tensor::new(vec![6, 6], eye).unwrap());
    let mut g = Graph::new();
    let d = g.leaf(dist.clone());
    let ident = prompt_projection(&mut g, d, &params).unwrap();
    assert!(g.value(ident).bit_eq(&dist));
}

#[test]
fn gradients_pass_with_order_path_flagged_stopped() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let m = 6;
    let params = test_params(&mut rng, 8, m, 4);
    let centers = random_points(&mut rng, m);
    let tokens = random_distribution(&mut rng, m, 8);
    let readout = random_distribution(&mut rng, m, 8);

    let all = params.params();
    let report = grad_check(
        |g| {
            let t = g.leaf(tokens.clone());
            let out = g2pg_forward(g, t, &centers, &params)?;
            // Route the loss through both the prompt and the learned order.
            let gathered = g.gather_rows(t, &out.order)?;
            let r = g.leaf(readout.clone());
            let weighted = g.mul(gathered, r)?;
            let a = g.sum_all(out.prompt)?;
            let b = g.sum_all(weighted)?;
            g.add(a, b)
        },
        &all,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());

    for p in &report.params {
        let expect = if p.name.starts_with("g.prompt") {
            ParamStatus::Pass
        } else {
            ParamStatus::GradientStopped
        };
        assert_eq!(p.status, expect, "{}", p.name);
        assert!(p.checked > 0, "{} was not probed", p.name);
    }
    // The stopped parameters still carry real prompt-path gradients.
    let down_grad = all[0].grad();
    assert!(down_grad.data().iter().any(|&v| v != 0.0));
}

#[test]
fn shared_use_contract_detects_mutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = test_params(&mut rng, 8, 6, 4);
    let centers = random_points(&mut rng, 6);
    let tokens = random_distribution(&mut rng, 6, 8);

    let fp = params.fingerprint();
    let mut g = Graph::new();
    let t = g.leaf(tokens);
    g2pg_forward(&mut g, t, &centers, &params).unwrap();
    // Forward passes never mutate shared parameters.
    params.ensure_unchanged(fp).unwrap();

    let bumped = params.down_b.value();
    params.down_b.set_value(bumped);
    assert!(matches!(
        params.ensure_unchanged(fp),
        Err(Error::SharedParamsMutated(_))
    ));
}
