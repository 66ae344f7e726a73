//! Run configuration: one versioned TOML file holding every hyperparameter,
//! echoed into each output directory for provenance.

use std::path::{Path, PathBuf};

use crate::binarize::BinarizerParams;
use crate::bias::{CorrectionConfig, LossParams};
use crate::cnn::{CnnConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::fold::FoldParams;
use crate::semlabel::LabelParams;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Paths {
    pub dataset: PathBuf,
    #[serde(default)]
    pub constraints: Option<PathBuf>,
}

/// `tail = 0` (or omitted) asks for the size-derived default `max(2, n/50)`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct FoldConfig {
    pub ratio: f64,
    #[serde(default)]
    pub tail: usize,
}

impl FoldConfig {
    pub fn resolve(&self, table_rows: usize) -> FoldParams {
        let tail = if self.tail == 0 {
            FoldParams::defaults_for(table_rows).tail
        } else {
            self.tail
        };
        FoldParams { ratio: self.ratio, tail }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CorrectionSettings {
    pub epochs: usize,
    pub period: usize,
    pub lambda_b: f64,
    pub lambda_g: f64,
    #[serde(default = "default_top_images")]
    pub top_images: usize,
}

fn default_top_images() -> usize {
    10
}

impl CorrectionSettings {
    pub fn to_config(self) -> CorrectionConfig {
        CorrectionConfig {
            epochs: self.epochs,
            period: self.period,
            loss: LossParams { lambda_b: self.lambda_b, lambda_g: self.lambda_g },
            top_images: self.top_images,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    /// Master seed; the network and training seeds derive from it.
    pub seed: u64,
    pub paths: Paths,
    pub cnn: CnnConfig,
    pub train: TrainConfig,
    pub binarizer: BinarizerParams,
    pub fold: FoldConfig,
    pub labels: LabelParams,
    pub correct: CorrectionSettings,
}

impl RunConfig {
    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Apply the master seed (optionally overridden on the command line) to
    /// the derived seeds, making every run a pure function of this file.
    pub fn resolve_seed(&mut self, cli_seed: Option<u64>) {
        if let Some(s) = cli_seed {
            self.seed = s;
        }
        self.cnn.seed = self.seed;
        self.train.seed = self.seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        self.train.validate(self.cnn.classes)?;
        self.binarizer.validate()?;
        self.labels.validate()?;
        if !(self.fold.ratio >= 0.0) || !self.fold.ratio.is_finite() {
            return Err(Error::Config("fold.ratio must be finite and >= 0".into()));
        }
        self.correct.to_config().validate()?;
        Ok(())
    }

    /// Defaults for the 32x32 two-class bias benchmark.
    pub fn bias_suite_defaults(dataset: PathBuf, constraints: Option<PathBuf>, seed: u64) -> Self {
        let mut cfg = RunConfig {
            seed,
            paths: Paths { dataset, constraints },
            cnn: CnnConfig {
                input_size: 32,
                channels: 3,
                blocks: vec![8, 16],
                k: 16,
                classes: 2,
                seed: 0,
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                learning_rate: 3e-3,
                l2: 1e-4,
                decay_factor: 0.5,
                decay_patience: 5,
                class_weights: None,
                seed: 0,
            },
            binarizer: BinarizerParams::default(),
            fold: FoldConfig { ratio: 0.5, tail: 0 },
            labels: LabelParams::default(),
            correct: CorrectionSettings {
                epochs: 50,
                period: 5,
                lambda_b: 5e-2,
                lambda_g: 1e-3,
                top_images: 10,
            },
        };
        cfg.resolve_seed(None);
        cfg
    }
}

/// Require that a referenced path exists before running a command.
pub fn require_path(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("{what} path `{}` does not exist", path.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::bias_suite_defaults(PathBuf::from("data"), None, 9);
        let text = cfg.to_toml();
        let mut back = RunConfig::parse_toml(&text).unwrap();
        back.resolve_seed(None);
        assert_eq!(back.seed, 9);
        assert_eq!(back.cnn.seed, 9);
        assert_eq!(back.train.seed, 10);
        back.validate().unwrap();
    }

    #[test]
    fn cli_seed_overrides() {
        let mut cfg = RunConfig::bias_suite_defaults(PathBuf::from("data"), None, 9);
        cfg.resolve_seed(Some(42));
        assert_eq!((cfg.seed, cfg.cnn.seed, cfg.train.seed), (42, 42, 43));
    }

    #[test]
    fn fold_tail_zero_resolves_to_table_default() {
        let fc = FoldConfig { ratio: 0.5, tail: 0 };
        assert_eq!(fc.resolve(800).tail, 16);
        assert_eq!(fc.resolve(10).tail, 2);
        let explicit = FoldConfig { ratio: 0.5, tail: 5 };
        assert_eq!(explicit.resolve(800).tail, 5);
    }
}
