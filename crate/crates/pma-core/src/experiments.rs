//! The three reporting experiments: a depth probe of the frozen backbone, a
//! component ablation, and an ordering benchmark. Each derives every run from
//! one RunConfig and fixed seeds, so a rerun reproduces its CSV byte for byte.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{backbone_forward, patchify};
use crate::config::{RunConfig, N_CLASSES};
use crate::data::{generate_dataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::graph::Graph;
use crate::model::{head_forward, HeadParams, OrderingMode, PmaModel};
use crate::opt::Adam;
use crate::tensor::Tensor;
use crate::train::{argmax_row, build_model, featurize, train_prepared};

/// One experiment cell: a row label and the final test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub label: String,
    pub accuracy: f64,
}

fn rows_to_csv(header: &str, rows: &[ExperimentRow]) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.label, r.accuracy));
    }
    out
}

pub fn probe_csv(rows: &[ExperimentRow]) -> String {
    rows_to_csv("n,accuracy", rows)
}

pub fn ablate_csv(rows: &[ExperimentRow]) -> String {
    rows_to_csv("config,accuracy", rows)
}

pub fn order_bench_csv(rows: &[ExperimentRow]) -> String {
    rows_to_csv("ordering,accuracy", rows)
}

/// Column-wise max and mean over an M x D matrix, concatenated to 1 x 2D.
fn pool_constant(t: &Tensor) -> Tensor {
    let (m, d) = (t.rows(), t.cols());
    let mut out = vec![0.0; 2 * d];
    for c in 0..d {
        let mut mx = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for r in 0..m {
            let v = t.data()[r * d + c];
            mx = mx.max(v);
            sum += v;
        }
        out[c] = mx;
        out[d + c] = sum / m as f64;
    }
    Tensor::new(vec![1, 2 * d], out).expect("pooled shape is valid")
}

/// Pooled features of every backbone stage per cloud: stage 0 holds the raw
/// patch embeddings, stage n (n >= 1) the tokens after transformer layer n.
fn stage_features(model: &PmaModel, clouds: &[PointSet]) -> Result<Vec<Vec<Tensor>>> {
    let mut stages: Vec<Vec<Tensor>> = (0..=model.cfg.l).map(|_| Vec::new()).collect();
    for ps in clouds {
        let patches = patchify(ps, model.cfg.m, model.backbone.k_patch, 0, &model.backbone)?;
        stages[0].push(pool_constant(&patches.embeddings));
        let harvest = backbone_forward(ps, &model.backbone)?;
        for (n, tokens) in harvest.tokens.iter().enumerate() {
            stages[n + 1].push(pool_constant(tokens));
        }
    }
    Ok(stages)
}

fn evaluate_head(head: &HeadParams, feats: &[Tensor], labels: &[usize]) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (f, &label) in feats.iter().zip(labels) {
        let mut g = Graph::new();
        let x = g.leaf(f.clone());
        let logits = head_forward(&mut g, head, x)?;
        correct += (argmax_row(g.value(logits)) == label) as usize;
        let ce = g.cross_entropy(logits, &[label])?;
        let v = g.value(ce).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("probe evaluation loss".to_string()));
        }
        loss_sum += v;
    }
    let n = labels.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Trains a fresh two-layer head on constant pooled features and returns the
/// final test accuracy. The head is re-seeded from the model seed so every
/// probe depth starts from identical weights.
pub fn train_probe_head(
    cfg: &RunConfig,
    feats_train: &[Tensor],
    labels_train: &[usize],
    feats_test: &[Tensor],
    labels_test: &[usize],
) -> Result<f64> {
    let width = feats_train.first().map_or(2 * cfg.d_tok, |t| t.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
    let head = HeadParams::new("probe", width, cfg.head_hidden, N_CLASSES, &mut rng);
    let mut opt = Adam::new(head.params(), cfg.adam_config());

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..feats_train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.model_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut g = Graph::new();
                let x = g.leaf(feats_train[i].clone());
                let logits = head_forward(&mut g, &head, x)?;
                let ce = g.cross_entropy(logits, &[labels_train[i]])?;
                if !g.value(ce).data()[0].is_finite() {
                    return Err(Error::NonFinite("probe training loss".to_string()));
                }
                let scaled = g.scale(ce, scale)?;
                g.backward(scaled)?;
            }
            opt.step();
        }
    }
    let (_, acc) = evaluate_head(&head, feats_test, labels_test)?;
    Ok(acc)
}

/// Depth-probe rows (n, accuracy) for n = 0..=L: everything frozen, stage-n
/// pooled features fed to a head trained from scratch per depth.
pub fn layer_probe(cfg: &RunConfig) -> Result<Vec<ExperimentRow>> {
    cfg.validate()?;
    let data = generate_dataset(cfg)?;
    let model = build_model(cfg)?;
    let train_stages = stage_features(&model, &data.train.clouds)?;
    let test_stages = stage_features(&model, &data.test.clouds)?;

    let mut rows = Vec::with_capacity(cfg.l + 1);
    for n in 0..=cfg.l {
        let accuracy = train_probe_head(
            cfg,
            &train_stages[n],
            &data.train.labels,
            &test_stages[n],
            &data.test.labels,
        )?;
        rows.push(ExperimentRow {
            label: n.to_string(),
            accuracy,
        });
    }
    Ok(rows)
}

/// Trains one model per labeled config. All variants must share the backbone
/// dimensions and model seed; patch features are then computed once and
/// reused, since only adapter-side toggles differ.
fn run_variants(data: &SyntheticDataset, variants: &[(&str, RunConfig)]) -> Result<Vec<ExperimentRow>> {
    for (_, cfg) in variants {
        cfg.validate()?;
    }
    let mut rows = Vec::with_capacity(variants.len());
    let mut cache = None;
    for (label, cfg) in variants {
        let model = build_model(cfg)?;
        if cache.is_none() {
            cache = Some((
                featurize(&model, &data.train.clouds)?,
                featurize(&model, &data.test.clouds)?,
            ));
        }
        let (feats_train, feats_test) = cache.as_ref().expect("cache filled above");
        let metrics = train_prepared(cfg, &model, data, feats_train, feats_test)?;
        rows.push(ExperimentRow {
            label: label.to_string(),
            accuracy: metrics.final_test_accuracy(),
        });
    }
    Ok(rows)
}

/// Component ablation: none / adapter / adapter+prompt / adapter+prompt+reorder,
/// all under the same dataset and model seed.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<ExperimentRow>> {
    cfg.validate()?;
    let data = generate_dataset(cfg)?;
    let toggles: [(&str, usize, bool, bool); 4] = [
        ("none", 0, false, false),
        ("adapter", cfg.adapter_depth, false, false),
        ("adapter+prompt", cfg.adapter_depth, true, false),
        ("adapter+prompt+reorder", cfg.adapter_depth, true, true),
    ];
    let variants: Vec<(&str, RunConfig)> = toggles
        .iter()
        .map(|&(label, depth, gate, reorder)| {
            let mut c = cfg.clone();
            c.adapter_depth = depth;
            c.gate_prompt_enabled = gate;
            c.reorder_enabled = reorder;
            (label, c)
        })
        .collect();
    run_variants(&data, &variants)
}

/// Ordering benchmark over the five static curves plus the learned ordering;
/// the gate prompt and reordering stay on for every row.
pub fn order_bench(cfg: &RunConfig) -> Result<Vec<ExperimentRow>> {
    cfg.validate()?;
    let data = generate_dataset(cfg)?;
    let modes: [(&str, OrderingMode); 6] = [
        ("x", OrderingMode::X),
        ("y", OrderingMode::Y),
        ("z", OrderingMode::Z),
        ("hilbert", OrderingMode::Hilbert),
        ("morton", OrderingMode::Morton),
        ("learned", OrderingMode::Learned),
    ];
    let variants: Vec<(&str, RunConfig)> = modes
        .iter()
        .map(|&(label, mode)| {
            let mut c = cfg.clone();
            c.ordering = mode;
            c.gate_prompt_enabled = true;
            c.reorder_enabled = true;
            (label, c)
        })
        .collect();
    run_variants(&data, &variants)
}
