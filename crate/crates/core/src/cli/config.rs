//! Run-wide configuration file.
//!
//! One JSON document drives every subcommand. Unknown keys are rejected and
//! reported with their path in the document, so typos fail loudly instead
//! of silently falling back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::afferents::{CLIP_LEN, SEGMENT_LEN, SEGMENT_STRIDE};
use crate::drumsim::SimConfig;
use crate::evalharness::{ModelFamily, RunOptions, DEFAULT_DROPOUTS};
use crate::nn::{AdamConfig, TrainConfig};
use crate::spectral::{SAMPLE_RATE, SPECTRUM_BINS};

/// Everything a run needs; every field has a default, so a missing file or
/// an empty document means the desk-scale run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. The `--seed` flag, then `ATL_SEED`, then this value;
    /// whichever wins also overwrites `sim.seed`.
    pub seed: u64,
    pub sim: SimConfig,
    pub features: FeatureConfig,
    pub nn: NnConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            features: FeatureConfig::default(),
            nn: NnConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Feature-extraction knobs. The spectrum size and window geometry are
/// fixed contracts of the pipeline; they are spelled out here so a config
/// written for different values fails instead of silently diverging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub spectrum_bins: usize,
    /// Vibration analysis window, in seconds.
    pub window_s: f64,
    /// Hop between vibration windows, in seconds.
    pub stride_s: f64,
    /// Frames per spatio-temporal clip.
    pub clip_len: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            spectrum_bins: SPECTRUM_BINS,
            window_s: SEGMENT_LEN as f64 / SAMPLE_RATE as f64,
            stride_s: SEGMENT_STRIDE as f64 / SAMPLE_RATE as f64,
            clip_len: CLIP_LEN,
        }
    }
}

/// Shared network and training knobs; `eval.overrides` refines them per
/// family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Optimizer steps per epoch; 0 means one full pass.
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub l2_factor: f64,
    /// Dropout rates: feature stack, then the two hidden dense layers.
    pub dropouts: [f64; 3],
}

impl Default for NnConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            steps_per_epoch: train.steps_per_epoch,
            learning_rate: AdamConfig::default().lr,
            l2_factor: 0.005,
            dropouts: DEFAULT_DROPOUTS,
        }
    }
}

/// Harness-level settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Per-family training overrides, keyed by family id (`sa-se`,
    /// `vib-te-aug`, ...).
    pub overrides: BTreeMap<String, FamilyOverride>,
}

/// Training-loop overrides for one family; unset fields keep `nn` values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyOverride {
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub steps_per_epoch: Option<usize>,
}

impl RunConfig {
    /// Reads and validates a config file; parse errors name the offending
    /// key path inside the document.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            CliError::Usage(format!(
                "{}: at `{}`: {}",
                path.display(),
                e.path(),
                e.inner()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the master-seed precedence: `--seed` flag, then the
    /// `ATL_SEED` environment value, then the file. The winner overwrites
    /// `sim.seed` so one number reproduces a whole run.
    pub fn with_seed(mut self, flag: Option<u64>, env: Option<&str>) -> Result<Self, CliError> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(text) = env {
            self.seed = text.trim().parse().map_err(|_| {
                CliError::Usage(format!(
                    "ATL_SEED must be an unsigned 64-bit integer, got `{text}`"
                ))
            })?;
        }
        self.sim.seed = self.seed;
        Ok(self)
    }

    /// Training options for one family: shared `nn` settings plus the
    /// family's overrides. The train seed is left for the harness to derive
    /// per fold.
    pub fn run_options(&self, family: ModelFamily) -> RunOptions {
        let mut train = TrainConfig {
            batch_size: self.nn.batch_size,
            max_epochs: self.nn.max_epochs,
            patience: self.nn.patience,
            steps_per_epoch: self.nn.steps_per_epoch,
            adam: AdamConfig {
                lr: self.nn.learning_rate,
                ..AdamConfig::default()
            },
            seed: 0,
        };
        if let Some(o) = self.eval.overrides.get(family.id()) {
            if let Some(v) = o.batch_size {
                train.batch_size = v;
            }
            if let Some(v) = o.max_epochs {
                train.max_epochs = v;
            }
            if let Some(v) = o.patience {
                train.patience = v;
            }
            if let Some(v) = o.steps_per_epoch {
                train.steps_per_epoch = v;
            }
        }
        RunOptions {
            clip_len: self.features.clip_len,
            l2_factor: self.nn.l2_factor,
            dropouts: self.nn.dropouts,
            train,
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let defaults = FeatureConfig::default();
        let f = &self.features;
        if f.spectrum_bins != SPECTRUM_BINS {
            return Err(usage(format!(
                "features.spectrum_bins: the spectrum is fixed at {SPECTRUM_BINS} bins, got {}",
                f.spectrum_bins
            )));
        }
        if (f.window_s - defaults.window_s).abs() > 1e-9 {
            return Err(usage(format!(
                "features.window_s: the analysis window is fixed at {} s ({SEGMENT_LEN} samples), got {}",
                defaults.window_s, f.window_s
            )));
        }
        if (f.stride_s - defaults.stride_s).abs() > 1e-9 {
            return Err(usage(format!(
                "features.stride_s: the window hop is fixed at {} s ({SEGMENT_STRIDE} samples), got {}",
                defaults.stride_s, f.stride_s
            )));
        }
        if f.clip_len == 0 || f.clip_len > 100 {
            return Err(usage(format!(
                "features.clip_len must be 1..=100, got {}",
                f.clip_len
            )));
        }
        let nn = &self.nn;
        if nn.batch_size == 0 {
            return Err(usage("nn.batch_size must be positive".into()));
        }
        if nn.max_epochs == 0 {
            return Err(usage("nn.max_epochs must be positive".into()));
        }
        if !(nn.learning_rate.is_finite() && nn.learning_rate > 0.0) {
            return Err(usage(format!(
                "nn.learning_rate must be a positive real, got {}",
                nn.learning_rate
            )));
        }
        if !(nn.l2_factor.is_finite() && nn.l2_factor >= 0.0) {
            return Err(usage(format!(
                "nn.l2_factor must be a nonnegative real, got {}",
                nn.l2_factor
            )));
        }
        for (i, &rate) in nn.dropouts.iter().enumerate() {
            if !(0.0..1.0).contains(&rate) {
                return Err(usage(format!(
                    "nn.dropouts[{i}] must be in [0, 1), got {rate}"
                )));
            }
        }
        for (key, o) in &self.eval.overrides {
            if ModelFamily::parse(key).is_none() {
                return Err(usage(format!(
                    "eval.overrides: unknown family `{key}` (expected one of sa-se, ra-se, sa-ste, ra-ste, vib-te, vib-te-aug)"
                )));
            }
            if o.batch_size == Some(0) {
                return Err(usage(format!(
                    "eval.overrides.{key}.batch_size must be positive"
                )));
            }
            if o.max_epochs == Some(0) {
                return Err(usage(format!(
                    "eval.overrides.{key}.max_epochs must be positive"
                )));
            }
        }
        Ok(())
    }
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"nn": {"learning_rat": 0.1}}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nn"), "{msg}");
        assert!(msg.contains("learning_rat"), "{msg}");
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn fixed_pipeline_knobs_reject_other_values() {
        let mut cfg = RunConfig::default();
        cfg.features.spectrum_bins = 128;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.features.window_s = 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.features.clip_len = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.nn.dropouts = [0.4, 1.0, 0.2];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.eval
            .overrides
            .insert("se-sa".into(), FamilyOverride::default());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_precedence_is_flag_env_file() {
        let file = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        let flag = file.clone().with_seed(Some(3), Some("2")).unwrap();
        assert_eq!(flag.seed, 3);
        assert_eq!(flag.sim.seed, 3);
        let env = file.clone().with_seed(None, Some("2")).unwrap();
        assert_eq!(env.seed, 2);
        assert_eq!(env.sim.seed, 2);
        let plain = file.clone().with_seed(None, None).unwrap();
        assert_eq!(plain.seed, 1);
        assert_eq!(plain.sim.seed, 1);
        let err = file.with_seed(None, Some("banana")).unwrap_err();
        assert!(err.to_string().contains("ATL_SEED"));
    }

    #[test]
    fn overrides_refine_run_options_per_family() {
        let mut cfg = RunConfig::default();
        cfg.nn.max_epochs = 40;
        cfg.eval.overrides.insert(
            "sa-ste".into(),
            FamilyOverride {
                max_epochs: Some(12),
                steps_per_epoch: Some(5),
                ..FamilyOverride::default()
            },
        );
        cfg.validate().unwrap();
        let ste = cfg.run_options(ModelFamily::SaSte);
        assert_eq!(ste.train.max_epochs, 12);
        assert_eq!(ste.train.steps_per_epoch, 5);
        assert_eq!(ste.train.batch_size, 64);
        let se = cfg.run_options(ModelFamily::SaSe);
        assert_eq!(se.train.max_epochs, 40);
        assert_eq!(se.train.steps_per_epoch, 0);
        assert_eq!(se.dropouts, DEFAULT_DROPOUTS);
    }
}
