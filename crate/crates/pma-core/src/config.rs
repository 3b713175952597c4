//! Run configuration: one flat JSON object covering model shape, backbone
//! build knobs, dataset generation and optimizer settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OrderingMode, PmaConfig};
use crate::opt::AdamConfig;
use crate::scan::Discretization;

pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // Model shape.
    pub l: usize,
    pub m: usize,
    pub d_tok: usize,
    pub s_state: usize,
    pub s_prompt: usize,
    pub k: usize,
    pub adapter_depth: usize,
    pub head_hidden: usize,
    pub ordering: OrderingMode,
    pub gate_prompt_enabled: bool,
    pub reorder_enabled: bool,
    /// Adapter discretization rule; "zoh" unless a config opts into "euler".
    #[serde(default)]
    pub discretization: Discretization,
    // Frozen backbone build.
    pub heads: usize,
    pub k_patch: usize,
    // Dataset generation.
    pub train_clouds: usize,
    pub test_clouds: usize,
    pub points: usize,
    pub sigma: f64,
    pub dataset_seed: u64,
    // Optimization.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub model_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = PmaConfig::default_desk();
        RunConfig {
            l: model.l,
            m: model.m,
            d_tok: model.d_tok,
            s_state: model.s_state,
            s_prompt: model.s_prompt,
            k: model.k,
            adapter_depth: model.adapter_depth,
            head_hidden: model.head_hidden,
            ordering: model.ordering,
            gate_prompt_enabled: model.gate_prompt_enabled,
            reorder_enabled: model.reorder_enabled,
            discretization: model.discretization,
            heads: 4,
            k_patch: 16,
            train_clouds: 400,
            test_clouds: 100,
            points: 512,
            sigma: 0.02,
            dataset_seed: 1,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            model_seed: 1,
        }
    }
}

impl RunConfig {
    pub fn pma_config(&self) -> PmaConfig {
        PmaConfig {
            l: self.l,
            m: self.m,
            d_tok: self.d_tok,
            s_state: self.s_state,
            s_prompt: self.s_prompt,
            k: self.k,
            adapter_depth: self.adapter_depth,
            head_hidden: self.head_hidden,
            ordering: self.ordering,
            gate_prompt_enabled: self.gate_prompt_enabled,
            reorder_enabled: self.reorder_enabled,
            discretization: self.discretization,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pma_config().validate()?;
        if self.heads == 0 || self.d_tok % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads = {} must divide d_tok = {}",
                self.heads, self.d_tok
            )));
        }
        if self.k_patch == 0 || self.k_patch > self.points {
            return Err(Error::Config(format!(
                "k_patch = {} outside 1..={} points",
                self.k_patch, self.points
            )));
        }
        if self.m > self.points {
            return Err(Error::Config(format!(
                "m = {} patches exceed {} points",
                self.m, self.points
            )));
        }
        if self.train_clouds == 0 || self.test_clouds == 0 {
            return Err(Error::Config("cloud counts must be positive".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma = {} must be >= 0", self.sigma)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps = {} must be > 0", self.eps)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}
