//! Experiment configuration, parsed from TOML with unknown keys rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DnhError, Result};
use crate::hierarchy::FreqBounds;
use crate::meta::MetaParams;
use crate::optim::OptimizerConfig;
use crate::streams::StreamSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Structure, frequencies and optimizer coefficients evolve online.
    Dnh,
    /// Fixed hierarchy with fixed frequencies.
    Static,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dnh => "dnh",
            Mode::Static => "static",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Defaults to the full stream length.
    pub total_steps: Option<u64>,
    pub log_every: u64,
    /// Initial number of levels.
    pub l0: usize,
    pub l_max: usize,
    /// Held-out samples per segment for the task matrix.
    pub eval_samples: usize,
    pub stream: StreamSpec,
    pub meta: MetaParams,
    pub optimizer: OptimizerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Dnh,
            seed: 0,
            total_steps: None,
            log_every: 100,
            l0: 2,
            l_max: 5,
            eval_samples: 500,
            stream: StreamSpec::default(),
            meta: MetaParams::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| DnhError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.meta.validate()?;
        self.optimizer.validate()?;
        if self.l0 == 0 || self.l0 > self.l_max {
            return Err(DnhError::Config(format!("need 1 <= l0 ({}) <= l_max ({})", self.l0, self.l_max)));
        }
        if self.log_every == 0 {
            return Err(DnhError::Config("log_every must be positive".into()));
        }
        if let Some(n) = self.total_steps {
            if n == 0 || n as usize > self.stream.total_len() {
                return Err(DnhError::Config(format!(
                    "total_steps {n} must lie in 1..={} (stream length)",
                    self.stream.total_len()
                )));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.total_steps.map_or(self.stream.total_len(), |n| n as usize)
    }

    /// Sets the run seed and, unless pinned separately, the stream seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec { seed: Some(self.stream.seed.unwrap_or(self.seed)), ..self.stream.clone() }
    }

    pub fn freq_bounds(&self) -> Result<FreqBounds> {
        FreqBounds::new(self.meta.f_min, self.meta.f_max)
    }

    /// Initial frequencies `f_max / 2^(ℓ−1)`, clamped to the bounds.
    pub fn initial_freqs(&self) -> Vec<f64> {
        (0..self.l0).map(|i| (self.meta.f_max / 2f64.powi(i as i32)).clamp(self.meta.f_min, self.meta.f_max)).collect()
    }

    /// Same experiment with every adaptive mechanism switched off.
    pub fn with_adaptation_disabled(&self) -> Self {
        let mut c = self.clone();
        c.meta = c.meta.with_adaptation_disabled();
        c.optimizer.sigma2 = 0.0;
        c.optimizer.eta_beta = 0.0;
        c
    }

    /// The configuration as it actually behaves: static mode is the evolving
    /// mode with adaptation switched off.
    pub fn effective(&self) -> Self {
        match self.mode {
            Mode::Dnh => self.clone(),
            Mode::Static => ExperimentConfig { mode: Mode::Dnh, ..self.with_adaptation_disabled() },
        }
    }

    /// SHA-256 of the effective configuration, so behaviourally identical
    /// configurations share a hash.
    pub fn config_hash(&self) -> String {
        hash_hex(&self.effective().to_toml_string())
    }

    /// Hash ignoring the seed, identifying replicas of one experiment.
    pub fn replica_hash(&self) -> String {
        let mut c = self.effective();
        c.seed = 0;
        hash_hex(&c.to_toml_string())
    }
}

fn hash_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
