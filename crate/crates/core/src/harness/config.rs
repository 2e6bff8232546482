use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_LAMBDA;
use crate::poincare::Curvature;
use crate::ssm::{EncoderConfig, NUM_STAGES};
use crate::style::DEFAULT_WINDOW;

/// Optimization and ablation settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub curvature: Curvature,
    pub seed: u64,
    pub enable_ssh: bool,
    pub enable_hmc: bool,
    /// 1-based stages re-stylized in the hallucinated branch.
    pub stages_hallucinated: Vec<usize>,
    /// Number of recent batch slopes defining min γ / max γ.
    pub slope_window: usize,
    /// Evaluate val/target accuracy every this many epochs (and at the end).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epochs: 40,
            batch_size: 32,
            lambda: DEFAULT_LAMBDA,
            curvature: Curvature::DEFAULT,
            seed: 0,
            enable_ssh: true,
            enable_hmc: true,
            stages_hallucinated: vec![1, 2, 3, 4],
            slope_window: DEFAULT_WINDOW,
            eval_every: 1,
        }
    }
}

impl RunConfig {
    /// Plain cross-entropy training.
    pub fn backbone(self) -> Self {
        Self {
            enable_ssh: false,
            enable_hmc: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.slope_window == 0 || self.eval_every == 0 {
            return fail("batch_size, slope_window and eval_every must be positive".into());
        }
        if self.enable_ssh && self.stages_hallucinated.is_empty() {
            return fail("stages_hallucinated is empty while SSH is enabled".into());
        }
        if let Some(&s) = self
            .stages_hallucinated
            .iter()
            .find(|&&s| s == 0 || s > NUM_STAGES)
        {
            return fail(format!("stage {s} outside 1..={NUM_STAGES}"));
        }
        Ok(())
    }

    /// Sorted, de-duplicated hallucinated stages.
    pub fn stage_set(&self) -> Vec<usize> {
        let mut s = self.stages_hallucinated.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// The single JSON document accepted by `--config`. Every section is
/// optional and falls back to its defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub run: RunConfig,
    pub encoder: EncoderConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.run.validate()?;
        self.encoder.validate()?;
        if self.encoder.num_classes != self.synthetic.num_fine() {
            return Err(Error::Config(format!(
                "encoder has {} classes but the benchmark has {} fine classes",
                self.encoder.num_classes,
                self.synthetic.num_fine()
            )));
        }
        if self.encoder.image_size != self.synthetic.image_size {
            return Err(Error::Config("encoder and benchmark image sizes differ".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_reference_settings() {
        let r = RunConfig::default();
        assert_eq!((r.lr, r.beta1, r.beta2), (1e-4, 0.9, 0.99));
        assert_eq!(r.lambda, 0.5);
        assert_eq!(r.curvature.value(), 0.1);
        assert_eq!((r.epochs, r.batch_size), (40, 32));
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"run": {"epochs": 3, "enable_hmc": false}}"#).unwrap();
        assert_eq!(cfg.run.epochs, 3);
        assert!(!cfg.run.enable_hmc);
        assert_eq!(cfg.run.lr, 1e-4);
        assert_eq!(cfg.synthetic, SyntheticConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"run": {"curvature": -1.0}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"run": {"lrr": 1.0}}"#).is_err());
        let bad = RunConfig {
            stages_hallucinated: vec![0, 5],
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
