//! Adam training over the trainable partition. Patch features are cached per
//! cloud once; the frozen transformer still reruns inside every graph so the
//! CLS row keeps its gradient path.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, N_CLASSES};
use crate::data::{generate_dataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::graph::Graph;
use crate::model::{
    count_trainable, pma_forward, precompute_features, PmaInput, PmaModel, PrecomputedFeatures,
};
use crate::opt::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Row 0 is the evaluation of the freshly initialized model; row e the state
/// after epoch e. Wall time stays out of the CSV so reruns byte-match.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub epochs: Vec<EpochMetrics>,
    pub wall_seconds: f64,
    pub trainable_params: usize,
}

impl MetricsRecord {
    pub fn final_test_accuracy(&self) -> f64 {
        self.epochs.last().expect("at least the epoch-0 row").test_acc
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.test_acc
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub metrics: MetricsRecord,
    pub model: PmaModel,
}

pub fn build_model(cfg: &RunConfig) -> Result<PmaModel> {
    PmaModel::new(
        &cfg.pma_config(),
        cfg.heads,
        cfg.k_patch,
        N_CLASSES,
        cfg.model_seed,
    )
}

pub fn featurize(model: &PmaModel, clouds: &[PointSet]) -> Result<Vec<PrecomputedFeatures>> {
    clouds.iter().map(|ps| precompute_features(model, ps)).collect()
}

pub(crate) fn argmax_row(t: &Tensor) -> usize {
    let row = t.row(0);
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy without touching any parameter.
pub fn evaluate(
    model: &PmaModel,
    features: &[PrecomputedFeatures],
    labels: &[usize],
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (f, &label) in features.iter().zip(labels) {
        let mut g = Graph::new();
        let logits = pma_forward(&mut g, model, &PmaInput::Features(f))?;
        correct += (argmax_row(g.value(logits)) == label) as usize;
        let ce = g.cross_entropy(logits, &[label])?;
        let v = g.value(ce).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("evaluation loss".to_string()));
        }
        loss_sum += v;
    }
    let n = labels.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Convenience for evaluation against raw clouds (featurizes first).
pub fn evaluate_clouds(
    model: &PmaModel,
    clouds: &[PointSet],
    labels: &[usize],
) -> Result<(f64, f64)> {
    let features = featurize(model, clouds)?;
    evaluate(model, &features, labels)
}

/// Core loop over prefeaturized splits. The model is mutated in place.
pub fn train_prepared(
    cfg: &RunConfig,
    model: &PmaModel,
    data: &SyntheticDataset,
    feats_train: &[PrecomputedFeatures],
    feats_test: &[PrecomputedFeatures],
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let n = feats_train.len();
    let mut opt = Adam::new(model.trainable_params(), cfg.adam_config());

    let mut epochs = Vec::with_capacity(cfg.epochs + 1);
    let (loss0, acc0) = evaluate(model, feats_train, &data.train.labels)?;
    let (_, test0) = evaluate(model, feats_test, &data.test.labels)?;
    epochs.push(EpochMetrics {
        epoch: 0,
        train_loss: loss0,
        train_acc: acc0,
        test_acc: test0,
    });

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.model_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut g = Graph::new();
                let logits = pma_forward(&mut g, model, &PmaInput::Features(&feats_train[i]))?;
                correct += (argmax_row(g.value(logits)) == data.train.labels[i]) as usize;
                let ce = g.cross_entropy(logits, &[data.train.labels[i]])?;
                let v = g.value(ce).data()[0];
                if !v.is_finite() {
                    return Err(Error::NonFinite("training loss".to_string()));
                }
                loss_sum += v;
                let scaled = g.scale(ce, scale)?;
                g.backward(scaled)?;
            }
            opt.step();
        }
        let (_, test_acc) = evaluate(model, feats_test, &data.test.labels)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            test_acc,
        });
    }

    Ok(MetricsRecord {
        epochs,
        wall_seconds: start.elapsed().as_secs_f64(),
        trainable_params: count_trainable(model).trainable_total(),
    })
}

/// Builds the model from the config seed and trains on the given dataset.
pub fn train_model(cfg: &RunConfig, data: &SyntheticDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let feats_train = featurize(&model, &data.train.clouds)?;
    let feats_test = featurize(&model, &data.test.clouds)?;
    let metrics = train_prepared(cfg, &model, data, &feats_train, &feats_test)?;
    Ok(TrainOutcome { metrics, model })
}

/// Full run from a config: dataset generation plus training.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(cfg)?;
    train_model(cfg, &data)
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    config: RunConfig,
    params: Vec<SavedParam>,
}

/// Saves config and trainable parameters only; the frozen backbone is
/// reconstructed from the model seed on load.
pub fn save_model(path: &Path, cfg: &RunConfig, model: &PmaModel) -> Result<()> {
    let params = model
        .trainable_params()
        .iter()
        .map(|p| SavedParam {
            name: p.name(),
            shape: p.shape(),
            data: p.value().data().to_vec(),
        })
        .collect();
    let saved = SavedModel {
        config: cfg.clone(),
        params,
    };
    fs::write(path, serde_json::to_string(&saved).expect("model serializes"))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(RunConfig, PmaModel)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let saved: SavedModel = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    saved.config.validate()?;
    let model = build_model(&saved.config)?;

    let by_name: HashMap<String, _> = model
        .trainable_params()
        .into_iter()
        .map(|p| (p.name(), p))
        .collect();
    if saved.params.len() != by_name.len() {
        return Err(Error::Data(format!(
            "model file holds {} trainable tensors, config implies {}",
            saved.params.len(),
            by_name.len()
        )));
    }
    for sp in saved.params {
        let param = by_name
            .get(&sp.name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {}", sp.name)))?;
        if param.shape() != sp.shape {
            return Err(Error::Data(format!(
                "parameter {} has shape {:?}, expected {:?}",
                sp.name,
                sp.shape,
                param.shape()
            )));
        }
        param.set_value(Tensor::new(sp.shape, sp.data)?);
    }
    Ok((saved.config, model))
}
