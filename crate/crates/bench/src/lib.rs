//! Shared fixtures for the benchmarks.

use evolq_core::data::{synth_dataset, Dataset};
use evolq_core::losses::{Fitness, LossKind, DEFAULT_BATCH_SIZE, DEFAULT_TAU};
use evolq_core::model::{Model, ScaleInit, ViTConfig};
use evolq_core::{Result, Tensor};

/// Deterministic pseudo-random matrix, cheap enough to build per benchmark.
pub fn matrix(rows: usize, cols: usize, seed: u32) -> Tensor {
    let mut state = seed.wrapping_mul(2_654_435_761).max(1);
    let data = (0..rows * cols)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            (state as f32 / u32::MAX as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// The default tiny ViT, quantized to 4/8 bits and calibrated, with its
/// full-precision twin and a calibration set.
pub struct Fixture {
    pub fp: Model,
    pub quant: Model,
    pub calib: Dataset,
}

impl Fixture {
    pub fn new(calib_size: usize) -> Result<Self> {
        let cfg = ViTConfig::default();
        let fp = Model::init(
            ViTConfig {
                weight_bits: 32,
                activation_bits: 32,
                ..cfg
            },
            0,
        )?;
        let calib = synth_dataset(calib_size, cfg.tokens, cfg.embed_dim, cfg.classes, 1, 4.0)?;
        let mut quant = fp.clone();
        quant.set_bits(cfg.weight_bits, cfg.activation_bits)?;
        quant.init_weight_scales(ScaleInit::MinMax)?;
        quant.calibrate(calib.samples())?;
        Ok(Self { fp, quant, calib })
    }

    pub fn fitness(&self, loss: LossKind) -> Result<Fitness> {
        Fitness::new(&self.fp, &self.calib, DEFAULT_BATCH_SIZE, loss, DEFAULT_TAU)
    }
}
