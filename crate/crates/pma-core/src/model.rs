//! Full adapter model: frozen backbone harvest, shared gate-prompt generator,
//! reordered layer-token sequence through the selective-scan adapter, pooled
//! readout head.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, positional_encode, transformer_harvest, BackboneParams, LayerHarvest};
use crate::error::{Error, Result};
use crate::gate_prompt::{g2pg_distribution, g2pg_forward, prompt_projection, G2pgParams};
use crate::geometry::{axis_order, curve_order, Axis, Curve, PointSet};
use crate::gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
use crate::graph::{Graph, NodeId};
use crate::init;
use crate::param::{version_fingerprint, Param};
use crate::scan::{Discretization, MambaBlockParams};
use crate::tensor::Tensor;

/// Quantization depth used when a space-filling curve supplies the token order.
pub const ORDER_BITS: u32 = 16;
/// Token width over generator hidden width.
const DOWN_RATIO: usize = 4;
/// Inner expansion factor of each adapter block.
const ADAPTER_EXPAND: usize = 2;
/// Causal depthwise convolution width inside each adapter block.
const ADAPTER_CONV_WIDTH: usize = 4;

/// How sequence positions are assigned to tokens before the adapter scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMode {
    Learned,
    X,
    Y,
    Z,
    Hilbert,
    Morton,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmaConfig {
    /// Backbone depth (number of harvested layers).
    pub l: usize,
    /// Patches per cloud.
    pub m: usize,
    /// Token width.
    pub d_tok: usize,
    /// Adapter state width.
    pub s_state: usize,
    /// Number of position bins emitted by the gate-prompt generator.
    pub s_prompt: usize,
    /// Neighborhood size of the generator's center KNN pooling.
    pub k: usize,
    /// Number of stacked adapter blocks; 0 feeds pooled raw features to the head.
    pub adapter_depth: usize,
    /// Hidden width of the readout head.
    pub head_hidden: usize,
    pub ordering: OrderingMode,
    /// When false the adapter scan runs without output-gate prompts.
    pub gate_prompt_enabled: bool,
    /// When false every layer keeps its native token order.
    pub reorder_enabled: bool,
    /// Discretization rule used by every adapter block.
    pub discretization: Discretization,
}

impl PmaConfig {
    pub fn default_desk() -> PmaConfig {
        PmaConfig {
            l: 4,
            m: 32,
            d_tok: 48,
            s_state: 16,
            s_prompt: 32,
            k: 4,
            adapter_depth: 1,
            head_hidden: 32,
            ordering: OrderingMode::Learned,
            gate_prompt_enabled: true,
            reorder_enabled: true,
            discretization: Discretization::ZohExact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 6] = [
            ("l", self.l),
            ("m", self.m),
            ("d_tok", self.d_tok),
            ("s_state", self.s_state),
            ("s_prompt", self.s_prompt),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.k < 1 || self.k > self.m {
            return Err(Error::Config(format!(
                "k = {} outside 1..={}",
                self.k, self.m
            )));
        }
        if self.ordering == OrderingMode::Learned && self.s_prompt < self.m {
            return Err(Error::Config(format!(
                "learned ordering needs s_prompt >= m, got {} < {}",
                self.s_prompt, self.m
            )));
        }
        Ok(())
    }
}

/// Two-layer SiLU MLP over the pooled readout.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub in_w: Param,
    pub in_b: Param,
    pub out_w: Param,
    pub out_b: Param,
}

impl HeadParams {
    pub fn new(
        prefix: &str,
        in_width: usize,
        hidden: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> HeadParams {
        let name = |field: &str| format!("{prefix}.{field}");
        HeadParams {
            in_w: Param::new(
                name("in.weight"),
                init::scaled_uniform(rng, in_width, vec![in_width, hidden]),
                true,
            ),
            in_b: Param::new(name("in.bias"), Tensor::zeros(&[hidden]), true),
            out_w: Param::new(
                name("out.weight"),
                init::scaled_uniform(rng, hidden, vec![hidden, classes]),
                true,
            ),
            out_b: Param::new(name("out.bias"), Tensor::zeros(&[classes]), true),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.in_w.clone(),
            self.in_b.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct PmaModel {
    pub cfg: PmaConfig,
    pub n_classes: usize,
    pub backbone: BackboneParams,
    pub g2pg: G2pgParams,
    pub adapter: Vec<MambaBlockParams>,
    pub head: HeadParams,
}

impl PmaModel {
    /// Builds backbone, generator, adapter stack and head from one seed.
    /// `heads` and `k_patch` shape the frozen backbone only.
    pub fn new(
        cfg: &PmaConfig,
        heads: usize,
        k_patch: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<PmaModel> {
        cfg.validate()?;
        if n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone =
            BackboneParams::new("backbone", cfg.l, cfg.m, cfg.d_tok, heads, k_patch, &mut rng)?;
        let d_hid = (cfg.d_tok / DOWN_RATIO).max(1);
        let g2pg = G2pgParams::new(
            "g2pg",
            cfg.d_tok,
            d_hid,
            cfg.s_prompt,
            cfg.s_state,
            cfg.k,
            &mut rng,
        );
        let adapter = (0..cfg.adapter_depth)
            .map(|i| {
                MambaBlockParams::new(
                    &format!("adapter{i}"),
                    cfg.d_tok,
                    ADAPTER_EXPAND * cfg.d_tok,
                    cfg.s_state,
                    ADAPTER_CONV_WIDTH,
                    Some(cfg.s_state),
                    cfg.discretization,
                    &mut rng,
                )
            })
            .collect::<Vec<_>>();
        let head = HeadParams::new("head", 5 * cfg.d_tok, cfg.head_hidden, n_classes, &mut rng);
        Ok(PmaModel {
            cfg: cfg.clone(),
            n_classes,
            backbone,
            g2pg,
            adapter,
            head,
        })
    }

    /// CLS row, generator, adapter and head parameters, in creation order.
    pub fn trainable_params(&self) -> Vec<Param> {
        let mut out = vec![self.backbone.cls.clone()];
        out.extend(self.g2pg.params());
        for block in &self.adapter {
            out.extend(block.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn frozen_params(&self) -> Vec<Param> {
        self.backbone.frozen_params()
    }

    pub fn all_params(&self) -> Vec<Param> {
        let mut out = self.frozen_params();
        out.extend(self.trainable_params());
        out
    }
}

/// Exact per-group parameter counts. Group entries only count parameters
/// currently marked trainable, so freezing a group drops the total by
/// exactly that group's size; the frozen backbone is reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub cls: usize,
    pub g2pg: usize,
    pub adapter: usize,
    pub head: usize,
    pub frozen_backbone: usize,
}

impl ParamCount {
    pub fn trainable_total(&self) -> usize {
        self.cls + self.g2pg + self.adapter + self.head
    }
}

pub fn count_trainable(model: &PmaModel) -> ParamCount {
    fn live(params: &[Param]) -> usize {
        params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.numel())
            .sum()
    }
    ParamCount {
        cls: live(&[model.backbone.cls.clone()]),
        g2pg: live(&model.g2pg.params()),
        adapter: model
            .adapter
            .iter()
            .map(|b| live(&b.params()))
            .sum(),
        head: live(&model.head.params()),
        frozen_backbone: model
            .backbone
            .frozen_params()
            .iter()
            .map(|p| p.numel())
            .sum(),
    }
}

/// Result of flattening per-layer tokens into one scan sequence.
#[derive(Debug)]
pub struct SequenceBuild {
    /// (L * M) x D_tok matrix, layer blocks in depth order.
    pub sequence: NodeId,
    /// Optional (L * M) x S_state prompt rows aligned with `sequence`.
    pub prompt: Option<NodeId>,
    /// Half-open row range of each layer block within `sequence`.
    pub layer_ranges: Vec<(usize, usize)>,
}

/// Reorders each layer's token rows (and prompt rows, when present) by that
/// layer's permutation and concatenates the layers along the row axis.
pub fn build_sequence(
    g: &mut Graph,
    tokens: &[NodeId],
    prompts: Option<&[NodeId]>,
    orders: &[Vec<usize>],
) -> Result<SequenceBuild> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument {
            op: "build_sequence",
            reason: "no layers".to_string(),
        });
    }
    if orders.len() != tokens.len() {
        return Err(Error::InvalidArgument {
            op: "build_sequence",
            reason: format!("{} layers but {} orders", tokens.len(), orders.len()),
        });
    }
    if let Some(p) = prompts {
        if p.len() != tokens.len() {
            return Err(Error::InvalidArgument {
                op: "build_sequence",
                reason: format!("{} layers but {} prompt blocks", tokens.len(), p.len()),
            });
        }
    }
    let mut tok_blocks = Vec::with_capacity(tokens.len());
    let mut prompt_blocks = Vec::with_capacity(tokens.len());
    let mut layer_ranges = Vec::with_capacity(tokens.len());
    let mut offset = 0;
    for (l, (&tok, order)) in tokens.iter().zip(orders).enumerate() {
        let rows = g.value(tok).rows();
        tok_blocks.push(g.gather_rows(tok, order)?);
        if let Some(p) = prompts {
            if g.value(p[l]).rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "build_sequence",
                    lhs: vec![g.value(p[l]).rows()],
                    rhs: vec![rows],
                });
            }
            prompt_blocks.push(g.gather_rows(p[l], order)?);
        }
        layer_ranges.push((offset, offset + rows));
        offset += rows;
    }
    let sequence = g.concat_rows(&tok_blocks)?;
    let prompt = match prompts {
        Some(_) => Some(g.concat_rows(&prompt_blocks)?),
        None => None,
    };
    Ok(SequenceBuild {
        sequence,
        prompt,
        layer_ranges,
    })
}

/// Patchify and positional-encoding results for one cloud. Neither depends
/// on any trainable parameter, so training loops compute them once per cloud
/// and replay them every epoch.
#[derive(Debug, Clone)]
pub struct PrecomputedFeatures {
    pub embeddings: Tensor,
    pub pos: Tensor,
    pub centers: PointSet,
}

/// Runs the frozen patch pipeline for one cloud.
pub fn precompute_features(model: &PmaModel, ps: &PointSet) -> Result<PrecomputedFeatures> {
    let patches = patchify(ps, model.cfg.m, model.backbone.k_patch, 0, &model.backbone)?;
    let pos = positional_encode(&model.backbone, &patches.centers)?;
    Ok(PrecomputedFeatures {
        embeddings: patches.embeddings,
        pos,
        centers: patches.centers,
    })
}

/// Model input: a raw cloud (runs patchify and the frozen transformer
/// in-graph, so the CLS row stays differentiable), cached patch features
/// (same transformer path without re-running patchify), or a precomputed
/// harvest of per-layer features consumed as constants.
pub enum PmaInput<'a> {
    Cloud(&'a PointSet),
    Features(&'a PrecomputedFeatures),
    Harvest(&'a LayerHarvest),
}

struct Prepared {
    tokens: Vec<NodeId>,
    cls_final: NodeId,
    centers: PointSet,
}

fn prepare(g: &mut Graph, model: &PmaModel, input: &PmaInput) -> Result<Prepared> {
    match input {
        PmaInput::Cloud(ps) => {
            let features = precompute_features(model, ps)?;
            prepare(g, model, &PmaInput::Features(&features))
        }
        PmaInput::Features(f) => {
            let emb = g.leaf(f.embeddings.clone());
            let pos = g.leaf(f.pos.clone());
            let (tokens, cls) = transformer_harvest(g, &model.backbone, emb, pos)?;
            Ok(Prepared {
                tokens,
                cls_final: *cls.last().expect("l >= 1"),
                centers: f.centers.clone(),
            })
        }
        PmaInput::Harvest(h) => {
            h.validate()?;
            if h.layer_count() != model.cfg.l
                || h.patch_count() != model.cfg.m
                || h.token_width() != model.cfg.d_tok
            {
                return Err(Error::InvalidArgument {
                    op: "pma_forward",
                    reason: format!(
                        "harvest stage: got {} layers of {} x {}, model expects {} of {} x {}",
                        h.layer_count(),
                        h.patch_count(),
                        h.token_width(),
                        model.cfg.l,
                        model.cfg.m,
                        model.cfg.d_tok
                    ),
                });
            }
            let tokens = h.tokens.iter().map(|t| g.leaf(t.clone())).collect();
            let last = h.cls.last().expect("validated nonempty");
            let cls_final = g.leaf(Tensor::matrix(1, last.data().len(), last.data().to_vec())?);
            Ok(Prepared {
                tokens,
                cls_final,
                centers: h.centers.clone(),
            })
        }
    }
}

/// Token order used by every layer when the mode is static.
fn static_order(centers: &PointSet, mode: OrderingMode) -> Result<Vec<usize>> {
    match mode {
        OrderingMode::X => Ok(axis_order(centers, Axis::X)),
        OrderingMode::Y => Ok(axis_order(centers, Axis::Y)),
        OrderingMode::Z => Ok(axis_order(centers, Axis::Z)),
        OrderingMode::Hilbert => curve_order(centers, Curve::Hilbert, ORDER_BITS),
        OrderingMode::Morton => curve_order(centers, Curve::Morton, ORDER_BITS),
        OrderingMode::Learned => Err(Error::InvalidArgument {
            op: "static_order",
            reason: "learned ordering has no static permutation".to_string(),
        }),
    }
}

fn forward_core(
    g: &mut Graph,
    model: &PmaModel,
    input: &PmaInput,
    explicit_orders: Option<&[Vec<usize>]>,
) -> Result<NodeId> {
    let cfg = &model.cfg;
    let prep = prepare(g, model, input)?;
    let fingerprint = version_fingerprint(&model.g2pg.params());

    let learn_orders =
        explicit_orders.is_none() && cfg.reorder_enabled && cfg.ordering == OrderingMode::Learned;
    let shared_static = if explicit_orders.is_none() && cfg.reorder_enabled && !learn_orders {
        Some(static_order(&prep.centers, cfg.ordering)?)
    } else {
        None
    };

    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(cfg.l);
    let mut prompts: Vec<NodeId> = Vec::with_capacity(cfg.l);
    for (layer, &tok) in prep.tokens.iter().enumerate() {
        if learn_orders {
            model.g2pg.ensure_unchanged(fingerprint)?;
            let out = g2pg_forward(g, tok, &prep.centers, &model.g2pg)?;
            orders.push(out.order);
            if cfg.gate_prompt_enabled {
                prompts.push(out.prompt);
            }
        } else {
            if cfg.gate_prompt_enabled {
                model.g2pg.ensure_unchanged(fingerprint)?;
                let dist = g2pg_distribution(g, tok, &prep.centers, &model.g2pg)?;
                prompts.push(prompt_projection(g, dist, &model.g2pg)?);
            }
            orders.push(match (explicit_orders, &shared_static) {
                (Some(eo), _) => eo[layer].clone(),
                (None, Some(s)) => s.clone(),
                (None, None) => (0..cfg.m).collect(),
            });
        }
    }

    let prompt_slices = cfg.gate_prompt_enabled.then_some(prompts.as_slice());
    let built = build_sequence(g, &prep.tokens, prompt_slices, &orders)?;

    let mut y = built.sequence;
    for block in &model.adapter {
        y = block.forward(g, y, built.prompt)?;
    }

    let (last_start, last_end) = *built.layer_ranges.last().expect("l >= 1");
    let f_last = {
        let rows = g.slice_rows(y, last_start, last_end)?;
        pool_rows(g, rows)?
    };
    let f_pre = if cfg.l >= 2 {
        let rows = g.slice_rows(y, 0, last_start)?;
        pool_rows(g, rows)?
    } else {
        // Depth-one models have no earlier layers; the pre-block slot is zero.
        g.leaf(Tensor::zeros(&[1, 2 * cfg.d_tok]))
    };
    let head_in = g.concat_cols(&[prep.cls_final, f_last, f_pre])?;
    head_forward(g, &model.head, head_in)
}

/// Two-layer SiLU MLP readout; also used standalone by the layer probe.
pub fn head_forward(g: &mut Graph, head: &HeadParams, x: NodeId) -> Result<NodeId> {
    let iw = g.param(&head.in_w);
    let ib = g.param(&head.in_b);
    let hidden = g.matmul(x, iw)?;
    let hidden = g.add_bias(hidden, ib)?;
    let hidden = g.silu(hidden)?;
    let ow = g.param(&head.out_w);
    let ob = g.param(&head.out_b);
    let logits = g.matmul(hidden, ow)?;
    g.add_bias(logits, ob)
}

/// Column-wise max and mean over the rows of `x`, concatenated to one 1 x 2D row.
fn pool_rows(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let mx = g.max_rows(x)?;
    let mn = g.mean_rows(x)?;
    g.concat_cols(&[mx, mn])
}

/// Full forward pass to a 1 x n_classes logit row.
pub fn pma_forward(g: &mut Graph, model: &PmaModel, input: &PmaInput) -> Result<NodeId> {
    forward_core(g, model, input, None)
}

/// Forward pass with caller-supplied per-layer permutations in place of the
/// configured ordering. Prompts still follow `gate_prompt_enabled`.
pub fn pma_forward_with_orders(
    g: &mut Graph,
    model: &PmaModel,
    input: &PmaInput,
    orders: &[Vec<usize>],
) -> Result<NodeId> {
    if orders.len() != model.cfg.l {
        return Err(Error::InvalidArgument {
            op: "pma_forward_with_orders",
            reason: format!("{} orders for {} layers", orders.len(), model.cfg.l),
        });
    }
    forward_core(g, model, input, Some(orders))
}

/// Finite-difference audit of every trainable parameter on a fixed toy
/// instance (two layers, eight patches, 16-wide tokens). `sample_limit` caps
/// the elements probed per parameter; `None` sweeps all of them.
pub fn toy_gradient_audit(sample_limit: Option<usize>) -> Result<GradCheckReport> {
    let cfg = PmaConfig {
        l: 2,
        m: 8,
        d_tok: 16,
        s_state: 8,
        s_prompt: 8,
        k: 3,
        adapter_depth: 1,
        head_hidden: 32,
        ordering: OrderingMode::Learned,
        gate_prompt_enabled: true,
        reorder_enabled: true,
        discretization: Discretization::ZohExact,
    };
    let model = PmaModel::new(&cfg, 4, 6, 4, 41)?;

    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let coords: Vec<[f64; 3]> = (0..48)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let ps = PointSet::from_coords(&coords)?;

    let params = model.trainable_params();
    let build = |g: &mut Graph| {
        let logits = pma_forward(g, &model, &PmaInput::Cloud(&ps))?;
        let ce = g.cross_entropy(logits, &[2])?;
        // Damping the objective keeps finite-difference rounding noise under
        // the checker's absolute floor on near-zero gradient elements; the
        // analytic-vs-numeric ratio itself is scale-invariant.
        g.scale(ce, 1e-3)
    };
    match sample_limit {
        Some(limit) => grad_check_sampled(build, &params, 1e-5, 1e-4, limit),
        None => grad_check(build, &params, 1e-5, 1e-4),
    }
}
