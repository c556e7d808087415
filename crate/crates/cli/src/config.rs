//! The JSON run configuration. Every key is optional; omitted keys take the
//! defaults below, unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use evolq_core::losses::{LossKind, DEFAULT_BATCH_SIZE, DEFAULT_TAU};
use evolq_core::model::{ScaleInit, ViTConfig};
use evolq_core::search::{default_epsilon, SearchSettings};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "EVQ_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    /// Record wall-clock milliseconds in search traces.
    pub timing: bool,
    pub vit: ViTConfig,
    pub paths: Paths,
    pub data: DataConfig,
    pub quant: QuantConfig,
    pub search: SearchConfig,
    pub loss: LossConfig,
    pub landscape: LandscapeConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("evolq-out"),
            threads: None,
            timing: false,
            vit: ViTConfig::default(),
            paths: Paths::default(),
            data: DataConfig::default(),
            quant: QuantConfig::default(),
            search: SearchConfig::default(),
            loss: LossConfig::default(),
            landscape: LandscapeConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

/// Existing artifacts to use instead of generating them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Quantized model; built from the FP model when absent.
    pub model: Option<PathBuf>,
    /// Full-precision reference; the seeded initialization when absent.
    pub fp_model: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

/// Synthetic data used when no dataset paths are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub calib_size: usize,
    pub eval_size: usize,
    pub separation: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            calib_size: 256,
            eval_size: 2048,
            separation: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    Minmax,
    Percentile,
    Omse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub scheme: SchemeName,
    pub percentile: f64,
    pub bias_correction: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeName::Minmax,
            percentile: 99.99,
            bias_correction: false,
        }
    }
}

impl QuantConfig {
    pub fn init(&self) -> ScaleInit {
        match self.scheme {
            SchemeName::Minmax => ScaleInit::MinMax,
            SchemeName::Percentile => ScaleInit::Percentile(self.percentile),
            SchemeName::Omse => ScaleInit::Omse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub passes: usize,
    pub population: usize,
    pub cycles: usize,
    pub samples: usize,
    /// Defaults by weight bit-width: 1e-3 at 8 bits and above, else 1e-4.
    pub epsilon: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let s = SearchSettings::default();
        Self {
            passes: s.passes,
            population: s.population,
            cycles: s.cycles,
            samples: s.samples,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub tau: f32,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::InfoNce,
            tau: DEFAULT_TAU,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub block: usize,
    pub steps: usize,
    /// Half range of each axis; ten times the search epsilon when absent.
    pub range: Option<f64>,
    pub direction_a: Option<usize>,
    pub direction_b: Option<usize>,
    /// Leading samples of the evaluation set used for the grid.
    pub eval_size: usize,
    pub pgm: bool,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            block: 0,
            steps: 21,
            range: None,
            direction_a: None,
            direction_b: None,
            eval_size: 256,
            pgm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub seeds: usize,
    pub dim: usize,
    pub omega: f64,
    pub amplitude: f64,
    pub quadratic: f64,
    /// Evaluations per method; gradient steps are budget / (2·dim).
    pub budget: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub spread: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            dim: 50,
            omega: 40.0,
            amplitude: 1.0,
            quadratic: 0.1,
            budget: 5000,
            lr: 1e-3,
            epsilon: 1e-3,
            spread: 0.5,
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the defaults when `path` is `None`, then
    /// applies `EVQ_SEED`. Command-line flags are layered on afterwards.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed.trim().parse().map_err(|_| {
                CliError::config(format!("{SEED_ENV}={seed:?} is not an unsigned integer"))
            })?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    pub fn epsilon(&self) -> f64 {
        self.search
            .epsilon
            .unwrap_or_else(|| default_epsilon(self.vit.weight_bits))
    }

    pub fn search_settings(&self) -> SearchSettings {
        SearchSettings {
            passes: self.search.passes,
            population: self.search.population,
            cycles: self.search.cycles,
            samples: self.search.samples,
            epsilon: self.epsilon(),
            seed: self.seed,
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> CliResult<()> {
        self.vit.validate()?;
        self.search_settings().validate()?;
        if !(self.loss.tau.is_finite() && self.loss.tau > 0.0) {
            return Err(CliError::config(format!(
                "tau {} must be positive",
                self.loss.tau
            )));
        }
        let min_batch = if self.loss.kind == LossKind::InfoNce {
            2
        } else {
            1
        };
        if self.loss.batch_size < min_batch {
            return Err(CliError::config(format!(
                "batch size {} is below {min_batch} for {}",
                self.loss.batch_size, self.loss.kind
            )));
        }
        if self.data.calib_size < self.loss.batch_size {
            return Err(CliError::config(format!(
                "calibration size {} is smaller than one batch of {}",
                self.data.calib_size, self.loss.batch_size
            )));
        }
        if self.data.eval_size == 0 {
            return Err(CliError::config("eval_size must be positive"));
        }
        if !(self.data.separation.is_finite() && self.data.separation > 0.0) {
            return Err(CliError::config("separation must be positive"));
        }
        if !(0.0..=100.0).contains(&self.quant.percentile) {
            return Err(CliError::config("percentile must lie in [0, 100]"));
        }
        let l = &self.landscape;
        if l.steps < 3 || l.steps % 2 == 0 {
            return Err(CliError::config(format!(
                "landscape steps {} must be odd and at least 3",
                l.steps
            )));
        }
        if let Some(r) = l.range {
            if !(r.is_finite() && r > 0.0) {
                return Err(CliError::config("landscape range must be positive"));
            }
        }
        if l.eval_size < self.loss.batch_size {
            return Err(CliError::config(
                "landscape eval_size is smaller than one batch",
            ));
        }
        if self.threads == Some(0) {
            return Err(CliError::config("threads must be at least 1"));
        }
        let c = &self.compare;
        if c.dim == 0 || c.seeds == 0 {
            return Err(CliError::config("compare dim and seeds must be positive"));
        }
        if c.budget < 2 * c.dim {
            return Err(CliError::config(format!(
                "compare budget {} is below one gradient step ({} evaluations)",
                c.budget,
                2 * c.dim
            )));
        }
        Ok(())
    }
}
