//! Data and models shared by the commands: loaded from disk when configured,
//! otherwise generated deterministically from the seed.

use std::fs;
use std::path::{Path, PathBuf};

use evolq_core::data::{synth_dataset, Dataset};
use evolq_core::losses::{top1_agreement, Fitness, LossKind};
use evolq_core::model::{io, Model, ViTConfig};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Offset between the configured seed and the synthetic-data seed, so data
/// and weights do not share a random stream.
pub const DATA_SEED_OFFSET: u64 = 1000;

/// Everything a scoring command works on.
pub struct Setup {
    pub fp: Model,
    pub quant: Model,
    pub calib: Dataset,
    pub eval: Dataset,
    /// Files read, for the manifest.
    pub inputs: Vec<PathBuf>,
}

/// Resolves models and data from the configuration.
///
/// * `fp_model` and `model` given: both loaded.
/// * only `fp_model`: the quantized model is built from it.
/// * only `model`: its own unquantized forward is the reference.
/// * neither: the seeded initialization, quantized.
pub fn setup(cfg: &RunConfig) -> CliResult<Setup> {
    let mut inputs = Vec::new();
    let fp = cfg
        .paths
        .fp_model
        .as_deref()
        .map(|p| load_model(p, &mut inputs))
        .transpose()?;
    let quant = cfg
        .paths
        .model
        .as_deref()
        .map(|p| load_model(p, &mut inputs))
        .transpose()?;
    let arch = fp
        .as_ref()
        .or(quant.as_ref())
        .map(|m| *m.config())
        .unwrap_or(cfg.vit);
    let (calib, eval) = data(cfg, &arch, &mut inputs)?;
    let (fp, quant) = match (fp, quant) {
        (Some(fp), Some(q)) => (fp, q),
        (Some(fp), None) => {
            let q = quantize(&fp, &calib, cfg)?;
            (fp, q)
        }
        (None, Some(q)) => (q.clone(), q),
        (None, None) => {
            let fp = Model::init(passthrough(cfg.vit), cfg.seed)?;
            let q = quantize(&fp, &calib, cfg)?;
            (fp, q)
        }
    };
    if !quant.config().same_architecture(fp.config()) {
        return Err(CliError::config(
            "quantized and full-precision models have different architectures",
        ));
    }
    Ok(Setup {
        fp,
        quant,
        calib,
        eval,
        inputs,
    })
}

/// Loads the configured datasets. Without paths, one synthetic set of
/// `eval_size + calib_size` samples is drawn: the evaluation set is its
/// prefix and the calibration set follows, so changing the calibration size
/// keeps the evaluation set fixed and the calibration sets nested.
fn data(
    cfg: &RunConfig,
    arch: &ViTConfig,
    files: &mut Vec<PathBuf>,
) -> CliResult<(Dataset, Dataset)> {
    let d = &cfg.data;
    let synthetic = || {
        synth_dataset(
            d.eval_size + d.calib_size,
            arch.tokens,
            arch.embed_dim,
            arch.classes,
            cfg.seed.wrapping_add(DATA_SEED_OFFSET),
            d.separation,
        )
    };
    let (calib, eval) = match (&cfg.paths.calib, &cfg.paths.eval) {
        (Some(c), Some(e)) => (load_dataset(c, files)?, load_dataset(e, files)?),
        (Some(c), None) => (load_dataset(c, files)?, synthetic()?.slice(0..d.eval_size)?),
        (None, Some(e)) => {
            let all = synthetic()?;
            (all.slice(d.eval_size..all.len())?, load_dataset(e, files)?)
        }
        (None, None) => {
            let all = synthetic()?;
            (
                all.slice(d.eval_size..all.len())?,
                all.slice(0..d.eval_size)?,
            )
        }
    };
    for (name, set) in [("calibration", &calib), ("evaluation", &eval)] {
        if set.tokens() != arch.tokens || set.dim() != arch.embed_dim {
            return Err(CliError::config(format!(
                "{name} set has {} tokens of width {}, model expects {} of width {}",
                set.tokens(),
                set.dim(),
                arch.tokens,
                arch.embed_dim
            )));
        }
    }
    Ok((calib, eval))
}

fn load_dataset(path: &Path, files: &mut Vec<PathBuf>) -> CliResult<Dataset> {
    files.push(path.to_path_buf());
    Dataset::load(path).map_err(|e| CliError::io(path, e))
}

fn load_model(path: &Path, files: &mut Vec<PathBuf>) -> CliResult<Model> {
    files.push(path.to_path_buf());
    io::load(path).map_err(|e| CliError::io(path, e))
}

pub fn save_model(model: &Model, path: &Path) -> CliResult<()> {
    io::save(model, path).map_err(|e| CliError::io(path, e))
}

pub fn passthrough(cfg: ViTConfig) -> ViTConfig {
    ViTConfig {
        weight_bits: 32,
        activation_bits: 32,
        ..cfg
    }
}

/// Copies `fp`, sets the configured bit-widths and fits every scale.
pub fn quantize(fp: &Model, calib: &Dataset, cfg: &RunConfig) -> CliResult<Model> {
    let mut q = fp.clone();
    q.set_bits(cfg.vit.weight_bits, cfg.vit.activation_bits)?;
    q.init_weight_scales(cfg.quant.init())?;
    q.calibrate(calib.samples())?;
    if cfg.quant.bias_correction {
        q.correct_biases(calib.samples())?;
    }
    Ok(q)
}

/// Top-1 agreement of `model`'s quantized predictions with `fp`'s
/// full-precision ones.
pub fn agreement(model: &Model, fp: &Model, data: &Dataset) -> CliResult<f64> {
    let q = model.forward(data.samples(), true)?;
    let f = fp.forward(data.samples(), false)?;
    Ok(top1_agreement(&q, &f)?)
}

pub fn fitness(cfg: &RunConfig, fp: &Model, data: &Dataset, kind: LossKind) -> CliResult<Fitness> {
    Ok(Fitness::new(
        fp,
        data,
        cfg.loss.batch_size,
        kind,
        cfg.loss.tau,
    )?)
}

pub fn output_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}
