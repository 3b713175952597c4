//! Geometry-constrained gate-prompt generation.
//!
//! One shared parameter set turns each layer's patch tokens into three things:
//! a row-stochastic distribution over prompt bins, a collision-free token
//! ordering read off that distribution, and a gate prompt projected from it.
//! The distribution and prompt stay differentiable; the ordering is a hard
//! decision recorded on the graph's tape and treated as constant by backward.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{knn, PointSet};
use crate::graph::{Graph, NodeId};
use crate::init;
use crate::param::{version_fingerprint, Param};
use crate::tensor::Tensor;

/// Parameters of the generator. A single instance serves every backbone
/// layer; the model checks the version fingerprint between layer invocations.
#[derive(Debug, Clone)]
pub struct G2pgParams {
    pub down_w: Param,
    pub down_b: Param,
    pub up_w: Param,
    pub up_b: Param,
    pub prompt_w: Param,
    pub prompt_b: Param,
    /// Token-graph neighbor count, self included.
    pub k: usize,
}

impl G2pgParams {
    pub fn new(
        prefix: &str,
        d_tok: usize,
        d_hid: usize,
        s_prompt: usize,
        s_state: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> G2pgParams {
        let name = |field: &str| format!("{prefix}.{field}");
        G2pgParams {
            down_w: Param::new(
                name("down.weight"),
                init::scaled_uniform(rng, d_tok, vec![d_tok, d_hid]),
                true,
            ),
            down_b: Param::new(name("down.bias"), Tensor::zeros(&[d_hid]), true),
            up_w: Param::new(
                name("up.weight"),
                init::scaled_uniform(rng, d_hid, vec![d_hid, s_prompt]),
                true,
            ),
            up_b: Param::new(name("up.bias"), Tensor::zeros(&[s_prompt]), true),
            prompt_w: Param::new(
                name("prompt.weight"),
                init::scaled_uniform(rng, s_prompt, vec![s_prompt, s_state]),
                true,
            ),
            prompt_b: Param::new(name("prompt.bias"), Tensor::zeros(&[s_state]), true),
            k,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.down_w.clone(),
            self.down_b.clone(),
            self.up_w.clone(),
            self.up_b.clone(),
            self.prompt_w.clone(),
            self.prompt_b.clone(),
        ]
    }

    pub fn set_trainable(&self, trainable: bool) {
        for p in self.params() {
            p.set_trainable(trainable);
        }
    }

    /// Version fingerprint over all parameters, for the shared-use contract.
    pub fn fingerprint(&self) -> u64 {
        version_fingerprint(&self.params())
    }

    /// Errors if any parameter value changed since `expected` was taken.
    /// Layers sharing the generator call this before each invocation.
    pub fn ensure_unchanged(&self, expected: u64) -> Result<()> {
        if self.fingerprint() != expected {
            return Err(Error::SharedParamsMutated(
                "gate-prompt generator parameters changed between shared uses".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer generator output. `distribution` and `prompt` live in the graph;
/// `order` is a plain permutation pinned on the decision tape.
#[derive(Debug, Clone)]
pub struct G2pgOutput {
    /// M x S_prompt, rows sum to 1.
    pub distribution: NodeId,
    /// Permutation of the M tokens, ascending by assigned bin.
    pub order: Vec<usize>,
    /// M x S_state gate prompt.
    pub prompt: NodeId,
}

/// Assigns each token a unique bin from its distribution row and returns the
/// tokens sorted ascending by bin.
///
/// Each token prefers its row argmax (lowest bin on value ties). Tokens are
/// processed in descending order of their argmax probability, lower token
/// index first on ties; a taken bin falls back to the nearest free one,
/// lower bin first on distance ties. With at least as many bins as tokens
/// the result is always a permutation.
pub fn assign_unique_indices(distribution: &Tensor) -> Result<Vec<usize>> {
    let m = distribution.rows();
    let s = distribution.cols();
    if s < m {
        return Err(Error::InvalidArgument {
            op: "assign_unique_indices",
            reason: format!("{m} tokens cannot get unique bins out of {s}"),
        });
    }
    let mut prefs: Vec<(usize, usize, f64)> = (0..m)
        .map(|t| {
            let row = distribution.row(t);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            (t, best, row[best])
        })
        .collect();
    prefs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));

    let mut taken = vec![false; s];
    let mut bin_of = vec![0usize; m];
    for (token, pref, _) in prefs {
        let mut chosen = None;
        if !taken[pref] {
            chosen = Some(pref);
        } else {
            for d in 1..s {
                if d <= pref && !taken[pref - d] {
                    chosen = Some(pref - d);
                    break;
                }
                if pref + d < s && !taken[pref + d] {
                    chosen = Some(pref + d);
                    break;
                }
            }
        }
        // s >= m guarantees a free bin within distance s-1.
        let bin = chosen.expect("free bin exists");
        taken[bin] = true;
        bin_of[token] = bin;
    }

    let mut by_bin: Vec<(usize, usize)> = bin_of.into_iter().zip(0..m).collect();
    by_bin.sort_unstable();
    Ok(by_bin.into_iter().map(|(_, t)| t).collect())
}

/// Maps a distribution to gate-prompt rows through the trainable projection.
pub fn prompt_projection(
    g: &mut Graph,
    distribution: NodeId,
    params: &G2pgParams,
) -> Result<NodeId> {
    let w = g.param(&params.prompt_w);
    let b = g.param(&params.prompt_b);
    let projected = g.matmul(distribution, w)?;
    g.add_bias(projected, b)
}

/// Runs the generator on one layer's tokens: KNN graph over patch centers,
/// down-projection, neighbor max pooling, up-projection with row softmax,
/// then the order assignment and prompt projection.
/// Shared front half of the generator: down-projection, neighborhood max
/// pooling over the center KNN graph, up-projection, row softmax. Callers
/// that skip reordering use this directly so the bin distribution and the
/// gate prompt stay bitwise identical to the full forward pass.
pub fn g2pg_distribution(
    g: &mut Graph,
    tokens: NodeId,
    centers: &PointSet,
    params: &G2pgParams,
) -> Result<NodeId> {
    let m = centers.len();
    let rows = g.value(tokens).rows();
    if rows != m {
        return Err(Error::ShapeMismatch {
            op: "g2pg_forward",
            lhs: vec![rows],
            rhs: vec![m],
        });
    }
    if params.k < 1 || params.k > m {
        return Err(Error::InvalidArgument {
            op: "g2pg_forward",
            reason: format!("neighbor count {} out of range for {} tokens", params.k, m),
        });
    }
    let neighbors: Vec<Vec<usize>> = (0..m)
        .map(|i| knn(centers, i, params.k))
        .collect::<Result<_>>()?;

    let dw = g.param(&params.down_w);
    let db = g.param(&params.down_b);
    let down = g.matmul(tokens, dw)?;
    let down = g.add_bias(down, db)?;
    let aggregated = g.neighbor_max_pool(down, &neighbors)?;

    let uw = g.param(&params.up_w);
    let ub = g.param(&params.up_b);
    let up = g.matmul(aggregated, uw)?;
    let up = g.add_bias(up, ub)?;
    g.softmax_rows(up)
}

pub fn g2pg_forward(
    g: &mut Graph,
    tokens: NodeId,
    centers: &PointSet,
    params: &G2pgParams,
) -> Result<G2pgOutput> {
    let distribution = g2pg_distribution(g, tokens, centers, params)?;
    let order = g.decide_order(distribution, |t| assign_unique_indices(t))?;
    let prompt = prompt_projection(g, distribution, params)?;
    Ok(G2pgOutput {
        distribution,
        order,
        prompt,
    })
}
