use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Variational Gaussian head trained by the ELBO.
    Bayesian,
    /// `σ` frozen at zero: a plain linear head trained by cross-entropy.
    Deterministic,
}

/// Every knob of a run. Serialized as `config.json` next to the run outputs
/// so the run can be replayed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Weight of the CDR penalty.
    pub alpha: f64,
    /// Sliding rate of the Discriminant matrix.
    pub beta: f64,
    /// Weight samples per batch (`T`).
    pub samples: usize,
    pub batch_size: usize,
    pub lr_extractor: f64,
    pub lr_head: f64,
    pub prior_variance: f64,
    /// L2 coefficient applied to extractor parameters through the optimizer.
    pub weight_decay: f64,
    /// Number of training steps `C`.
    pub steps: u64,
    pub seed: u64,
    /// Extractor layer widths after the input.
    pub hidden: Vec<usize>,
    pub head: HeadMode,
    /// Include the cross-entropy term in the extractor objective.
    pub erm_term: bool,
    pub val_fraction: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub data: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 0.95,
            samples: 3,
            batch_size: 32,
            lr_extractor: 5e-5,
            lr_head: 5e-5,
            prior_variance: 10.0,
            weight_decay: 1e-4,
            steps: 2000,
            seed: 0,
            hidden: vec![16, 8],
            head: HeadMode::Bayesian,
            erm_term: true,
            val_fraction: 0.2,
            eval_every: 50,
            checkpoint_every: 500,
            data: None,
            target: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::arg(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be ≥ 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.samples == 0 {
            return bad("samples (T) must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be ≥ 1".into());
        }
        for (name, lr) in [("lr_extractor", self.lr_extractor), ("lr_head", self.lr_head)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.prior_variance > 0.0) {
            return bad(format!("prior variance must be positive, got {}", self.prior_variance));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("invalid hidden sizes {:?}", self.hidden));
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return bad(format!("validation fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if !self.erm_term && self.alpha == 0.0 {
            return bad("extractor objective is empty: ERM term off and alpha = 0".into());
        }
        Ok(())
    }

    /// Defaults with step count and learning rates sized for a few thousand
    /// CPU steps on the synthetic benchmark. The remaining values are the
    /// standard defaults.
    pub fn desk_scale() -> Self {
        Self {
            steps: 5000,
            lr_extractor: 3e-3,
            lr_head: 0.1,
            eval_every: 100,
            ..Self::default()
        }
    }

    /// Plain ERM baseline: no penalty and a deterministic head.
    pub fn erm_baseline(&self) -> Self {
        Self {
            alpha: 0.0,
            erm_term: true,
            head: HeadMode::Deterministic,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!((c.alpha, c.beta, c.samples, c.batch_size), (5.0, 0.95, 3, 32));
        assert_eq!((c.lr_extractor, c.lr_head, c.prior_variance), (5e-5, 5e-5, 10.0));
    }

    #[test]
    fn invalid_values_rejected() {
        let base = ExperimentConfig::default();
        for bad in [
            ExperimentConfig { alpha: -1.0, ..base.clone() },
            ExperimentConfig { beta: 1.0, ..base.clone() },
            ExperimentConfig { samples: 0, ..base.clone() },
            ExperimentConfig { batch_size: 0, ..base.clone() },
            ExperimentConfig { erm_term: false, alpha: 0.0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn json_roundtrip_and_unknown_fields() {
        let c = ExperimentConfig { seed: 4, ..Default::default() };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"alpah": 1}"#).is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"alpha": 2.5}"#).unwrap();
        assert_eq!(partial.alpha, 2.5);
        assert_eq!(partial.beta, 0.95);
    }
}
