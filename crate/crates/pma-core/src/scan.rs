//! Selective state-space machinery: zero-order-hold discretization, a dense
//! quadratic-time reference evaluation of the scan, and the gated block that
//! wraps the scan into a token mixer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init;
use crate::param::Param;
use crate::tensor::Tensor;

/// Threshold on |a·delta| below which the discretized input coefficient is
/// taken at its series limit delta·b to avoid catastrophic cancellation.
pub const ZOH_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discretization {
    /// a_bar = exp(a·delta), b_bar = (exp(a·delta) − 1)/a · b.
    #[default]
    #[serde(rename = "zoh")]
    ZohExact,
    /// a_bar = exp(a·delta), b_bar = delta·b.
    #[serde(rename = "euler")]
    Euler,
}

/// Zero-order-hold discretization of one diagonal state coefficient. The
/// removable singularity at a·delta → 0 is evaluated at its limit delta·b.
pub fn zoh_discretize(a: f64, delta: f64, b: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument {
            op: "zoh_discretize",
            reason: format!("delta must be positive, got {}", delta),
        });
    }
    Ok(discretize_pair(a, delta, b, Discretization::ZohExact))
}

pub(crate) fn discretize_pair(a: f64, delta: f64, b: f64, scheme: Discretization) -> (f64, f64) {
    let x = a * delta;
    let a_bar = x.exp();
    let b_bar = match scheme {
        Discretization::Euler => delta * b,
        Discretization::ZohExact => {
            if x.abs() < ZOH_GUARD {
                delta * b
            } else {
                (x.exp() - 1.0) / a * b
            }
        }
    };
    (a_bar, b_bar)
}

/// phi = b_bar / b and its derivative in a. Near a·delta = 0 the exact
/// derivative (delta·exp(a·delta) − phi)/a degenerates; its limit is
/// delta²/2.
pub(crate) fn phi_and_da(a: f64, delta: f64, scheme: Discretization) -> (f64, f64) {
    match scheme {
        Discretization::Euler => (delta, 0.0),
        Discretization::ZohExact => {
            let x = a * delta;
            if x.abs() < ZOH_GUARD {
                (delta, delta * delta / 2.0)
            } else {
                let phi = (x.exp() - 1.0) / a;
                ((phi), (delta * x.exp() - phi) / a)
            }
        }
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Dense reference evaluation of the selective scan, expanding the recurrence
/// into the full lower-triangular sum
/// y_t[e] = Σ_{s≤t} (c_t+p_t)ᵀ (Π_{r=s+1..t} a_bar_r ⊙) b_bar_s · x_s[e]
///        + d[e]·x_t[e].
/// Quadratic in sequence length; exists purely as an oracle for the scan.
#[allow(clippy::too_many_arguments)]
pub fn reference_scan(
    x: &Tensor,
    delta: &Tensor,
    b: &Tensor,
    c: &Tensor,
    a: &Tensor,
    d: &Tensor,
    prompt: Option<&Tensor>,
    scheme: Discretization,
) -> Result<Tensor> {
    let t_len = x.rows();
    let e_ch = x.cols();
    let s_state = a.numel();
    let expect = |got: &Tensor, rows: usize, cols: usize, what: &'static str| -> Result<()> {
        if got.rows() != rows || got.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: got.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        Ok(())
    };
    expect(delta, t_len, 1, "reference_scan delta")?;
    expect(b, t_len, s_state, "reference_scan b")?;
    expect(c, t_len, s_state, "reference_scan c")?;
    if let Some(p) = prompt {
        expect(p, t_len, s_state, "reference_scan prompt")?;
    }
    if d.numel() != e_ch {
        return Err(Error::ShapeMismatch {
            op: "reference_scan d",
            lhs: d.shape().to_vec(),
            rhs: vec![e_ch],
        });
    }
    if let Some(bad) = delta.data().iter().find(|v| **v <= 0.0) {
        return Err(Error::InvalidArgument {
            op: "reference_scan",
            reason: format!("delta must be positive, got {}", bad),
        });
    }

    let mut a_bar = vec![0.0; t_len * s_state];
    let mut b_bar = vec![0.0; t_len * s_state];
    for t in 0..t_len {
        for s in 0..s_state {
            let (ab, bb) = discretize_pair(
                a.data()[s],
                delta.data()[t],
                b.get2(t, s),
                scheme,
            );
            a_bar[t * s_state + s] = ab;
            b_bar[t * s_state + s] = bb;
        }
    }
    let cp: Vec<f64> = match prompt {
        Some(p) => c
            .data()
            .iter()
            .zip(p.data())
            .map(|(cc, pp)| cc + pp)
            .collect(),
        None => c.data().to_vec(),
    };

    let mut y = vec![0.0; t_len * e_ch];
    let mut prod = vec![0.0; s_state];
    for t in 0..t_len {
        prod.iter_mut().for_each(|v| *v = 1.0);
        for s in (0..=t).rev() {
            // prod holds Π_{r=s+1..t} a_bar_r at this point.
            let mut w = 0.0;
            for k in 0..s_state {
                w += cp[t * s_state + k] * prod[k] * b_bar[s * s_state + k];
            }
            for e in 0..e_ch {
                y[t * e_ch + e] += w * x.get2(s, e);
            }
            for k in 0..s_state {
                prod[k] *= a_bar[s * s_state + k];
            }
        }
        for e in 0..e_ch {
            y[t * e_ch + e] += d.data()[e] * x.get2(t, e);
        }
    }
    Tensor::new(vec![t_len, e_ch], y)
}

/// Parameters of one gated selective-scan block. The block maps a T×D token
/// sequence to T×D: expand, depthwise causal conv + SiLU, data-dependent
/// delta/B/C projections, the scan itself, a SiLU gate, a contraction, and a
/// residual connection back onto the input.
#[derive(Debug, Clone)]
pub struct MambaBlockParams {
    pub in_proj: Param,
    pub conv_w: Param,
    pub conv_b: Param,
    pub delta_w: Param,
    pub delta_b: Param,
    pub b_proj: Param,
    pub c_proj: Param,
    pub a_log: Param,
    pub d: Param,
    pub out_proj: Param,
    /// Maps prompts of a foreign width onto the state width; absent when the
    /// widths already agree.
    pub prompt_adapt: Option<Param>,
    pub scheme: Discretization,
    expand: usize,
}

impl MambaBlockParams {
    pub fn new(
        prefix: &str,
        d_model: usize,
        expand: usize,
        s_state: usize,
        conv_width: usize,
        prompt_width: Option<usize>,
        scheme: Discretization,
        rng: &mut ChaCha8Rng,
    ) -> MambaBlockParams {
        let name = |field: &str| format!("{prefix}.{field}");
        // State-decay logs start at ln(1..=S); decay rates then span roughly
        // one decade, the usual real-valued diagonal init.
        let a_log_init = Tensor::vector((1..=s_state).map(|s| (s as f64).ln()).collect());
        MambaBlockParams {
            in_proj: Param::new(
                name("in_proj.weight"),
                init::scaled_uniform(rng, d_model, vec![d_model, 2 * expand]),
                true,
            ),
            conv_w: Param::new(
                name("conv.weight"),
                init::scaled_uniform(rng, conv_width, vec![expand, conv_width]),
                true,
            ),
            conv_b: Param::new(name("conv.bias"), Tensor::zeros(&[expand]), true),
            delta_w: Param::new(
                name("delta.weight"),
                init::scaled_uniform(rng, expand, vec![expand, 1]),
                true,
            ),
            delta_b: Param::new(
                name("delta.bias"),
                Tensor::vector(vec![softplus_inv(0.1)]),
                true,
            ),
            b_proj: Param::new(
                name("b_proj.weight"),
                init::scaled_uniform(rng, expand, vec![expand, s_state]),
                true,
            ),
            c_proj: Param::new(
                name("c_proj.weight"),
                init::scaled_uniform(rng, expand, vec![expand, s_state]),
                true,
            ),
            a_log: Param::new(name("a_log"), a_log_init, true),
            d: Param::new(name("d"), Tensor::vector(vec![1.0; expand]), true),
            out_proj: Param::new(
                name("out_proj.weight"),
                init::scaled_uniform(rng, expand, vec![expand, d_model]),
                true,
            ),
            prompt_adapt: prompt_width.filter(|&w| w != s_state).map(|w| {
                Param::new(
                    name("prompt_adapt.weight"),
                    init::scaled_uniform(rng, w, vec![w, s_state]),
                    true,
                )
            }),
            scheme,
            expand,
        }
    }

    /// Same parameter cells, different discretization rule.
    pub fn with_scheme(mut self, scheme: Discretization) -> MambaBlockParams {
        self.scheme = scheme;
        self
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = vec![
            self.in_proj.clone(),
            self.conv_w.clone(),
            self.conv_b.clone(),
            self.delta_w.clone(),
            self.delta_b.clone(),
            self.b_proj.clone(),
            self.c_proj.clone(),
            self.a_log.clone(),
            self.d.clone(),
            self.out_proj.clone(),
        ];
        if let Some(p) = &self.prompt_adapt {
            out.push(p.clone());
        }
        out
    }

    /// Run the block on a T×D node. `prompt` is an optional T×S node added to
    /// the readout vectors c_t inside the scan.
    pub fn forward(&self, g: &mut Graph, u: NodeId, prompt: Option<NodeId>) -> Result<NodeId> {
        let e = self.expand;
        let w_in = g.param(&self.in_proj);
        let xz = g.matmul(u, w_in)?;
        let x_raw = g.slice_cols(xz, 0, e)?;
        let z = g.slice_cols(xz, e, 2 * e)?;

        let conv_w = g.param(&self.conv_w);
        let conv_b = g.param(&self.conv_b);
        let x_conv = g.causal_conv1d(x_raw, conv_w, conv_b)?;
        let x = g.silu(x_conv)?;

        let delta_w = g.param(&self.delta_w);
        let delta_b = g.param(&self.delta_b);
        let delta_pre = g.matmul(x, delta_w)?;
        let delta_pre = g.add_bias(delta_pre, delta_b)?;
        let delta = g.softplus(delta_pre)?;

        let b_w = g.param(&self.b_proj);
        let c_w = g.param(&self.c_proj);
        let b = g.matmul(x, b_w)?;
        let c = g.matmul(x, c_w)?;

        let a_log = g.param(&self.a_log);
        let a_exp = g.exp(a_log)?;
        let a = g.scale(a_exp, -1.0)?;
        let d = g.param(&self.d);

        let prompt = match (prompt, &self.prompt_adapt) {
            (Some(p), Some(adapt)) => {
                let w = g.param(adapt);
                Some(g.matmul(p, w)?)
            }
            (p, _) => p,
        };
        let y = g.selective_scan(x, delta, b, c, a, d, prompt, self.scheme)?;
        let gate = g.silu(z)?;
        let y = g.mul(y, gate)?;

        let w_out = g.param(&self.out_proj);
        let projected = g.matmul(y, w_out)?;
        g.add(projected, u)
    }
}
