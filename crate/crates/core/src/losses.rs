//! Losses between quantized and full-precision predictions, and the
//! batch-averaged fitness used by the search.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, ViTConfig};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f32 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const KL_FLOOR: f64 = 1e-12;

/// Quantized predictions `p` and full-precision predictions `o`, both
/// `[batch, dim]` row-major and index-aligned.
#[derive(Debug, Clone, Copy)]
pub struct PredictionPair<'a> {
    p: &'a [f32],
    o: &'a [f32],
    dim: usize,
    tau: f32,
}

impl<'a> PredictionPair<'a> {
    pub fn new(p: &'a [f32], o: &'a [f32], dim: usize, tau: f32) -> Result<Self> {
        if dim == 0 || p.is_empty() || p.len() % dim != 0 {
            return Err(Error::dim(format!(
                "{} prediction values do not form rows of {dim}",
                p.len()
            )));
        }
        if p.len() != o.len() {
            return Err(Error::dim(format!(
                "prediction batches differ in size: {} vs {}",
                p.len(),
                o.len()
            )));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::param(format!("temperature {tau} must be positive")));
        }
        Ok(Self { p, o, dim, tau })
    }

    pub fn from_tensors(p: &'a Tensor, o: &'a Tensor, tau: f32) -> Result<Self> {
        if p.shape() != o.shape() {
            return Err(Error::dim(format!(
                "prediction shapes differ: {:?} vs {:?}",
                p.shape(),
                o.shape()
            )));
        }
        let dim = *p.shape().last().expect("tensors have at least one axis");
        Self::new(p.data(), o.data(), dim, tau)
    }

    pub fn batch(&self) -> usize {
        self.p.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    fn rows(&self) -> impl Iterator<Item = (&'a [f32], &'a [f32])> {
        self.p
            .chunks_exact(self.dim)
            .zip(self.o.chunks_exact(self.dim))
    }
}

fn normalized(rows: &[f32], dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.chunks_exact(dim).enumerate() {
        let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroNorm { row: i });
        }
        out.extend(row.iter().map(|&v| v as f64 / norm));
    }
    Ok(out)
}

/// Contrastive loss: for each sample the positive is the aligned
/// full-precision prediction and the negatives are the other full-precision
/// predictions in the batch. Rows are L2-normalized; per-sample losses are
/// averaged.
pub fn info_nce(pair: &PredictionPair<'_>) -> Result<f64> {
    let (n, d) = (pair.batch(), pair.dim);
    let p = normalized(pair.p, d)?;
    let o = normalized(pair.o, d)?;
    let inv_tau = 1.0 / pair.tau as f64;
    let mut logits = vec![0.0f64; n];
    let mut total = 0.0f64;
    for i in 0..n {
        let pi = &p[i * d..(i + 1) * d];
        for (j, l) in logits.iter_mut().enumerate() {
            let oj = &o[j * d..(j + 1) * d];
            *l = pi.iter().zip(oj).map(|(a, b)| a * b).sum::<f64>() * inv_tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / n as f64)
}

/// Mean squared difference of the raw predictions.
pub fn mse(pair: &PredictionPair<'_>) -> f64 {
    let sum: f64 = pair
        .p
        .iter()
        .zip(pair.o)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    sum / pair.p.len() as f64
}

/// `1 − mean cosine similarity`. A zero vector has similarity 0 with any
/// other vector and 1 with itself.
pub fn cosine(pair: &PredictionPair<'_>) -> f64 {
    let mut total = 0.0f64;
    for (p, o) in pair.rows() {
        let dot: f64 = p.iter().zip(o).map(|(a, b)| *a as f64 * *b as f64).sum();
        let np = p.iter().map(|a| *a as f64 * *a as f64).sum::<f64>().sqrt();
        let no = o.iter().map(|a| *a as f64 * *a as f64).sum::<f64>().sqrt();
        total += if p == o {
            1.0
        } else if np == 0.0 || no == 0.0 {
            0.0
        } else {
            (dot / (np * no)).clamp(-1.0, 1.0)
        };
    }
    1.0 - total / pair.batch() as f64
}

fn softmax64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64));
    let e: Vec<f64> = row.iter().map(|v| (*v as f64 - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| v / sum).collect()
}

/// KL divergence between probability rows, each floored at [`KL_FLOOR`].
pub fn kl_divergence(target: &[f64], approx: &[f64]) -> f64 {
    target
        .iter()
        .zip(approx)
        .map(|(t, a)| {
            let (t, a) = (t.max(KL_FLOOR), a.max(KL_FLOOR));
            t * (t / a).ln()
        })
        .sum()
}

/// Mean `KL(softmax(o) ‖ softmax(p))`.
pub fn kl(pair: &PredictionPair<'_>) -> f64 {
    let total: f64 = pair
        .rows()
        .map(|(p, o)| kl_divergence(&softmax64(o), &softmax64(p)))
        .sum();
    total / pair.batch() as f64
}

/// Fraction of rows whose arg-max agrees (first index wins ties).
pub fn top1_agreement(p: &Tensor, o: &Tensor) -> Result<f64> {
    let pair = PredictionPair::from_tensors(p, o, 1.0)?;
    let argmax = |row: &[f32]| {
        row.iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    };
    let agree = pair.rows().filter(|(p, o)| argmax(p) == argmax(o)).count();
    Ok(agree as f64 / pair.batch() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    InfoNce,
    Mse,
    Cosine,
    Kl,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::InfoNce,
        LossKind::Mse,
        LossKind::Cosine,
        LossKind::Kl,
    ];

    pub fn evaluate(self, pair: &PredictionPair<'_>) -> Result<f64> {
        Ok(match self {
            LossKind::InfoNce => info_nce(pair)?,
            LossKind::Mse => mse(pair),
            LossKind::Cosine => cosine(pair),
            LossKind::Kl => kl(pair),
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::InfoNce => "infonce",
            LossKind::Mse => "mse",
            LossKind::Cosine => "cosine",
            LossKind::Kl => "kl",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::param(format!("unknown loss `{s}` (infonce, mse, cosine, kl)")))
    }
}

/// Calibration batches in a frozen order together with the full-precision
/// model's cached predictions on them.
///
/// `score(model)` is the mean per-batch loss between `model`'s quantized
/// predictions and the cached full-precision ones. A ragged final batch is
/// dropped.
#[derive(Debug, Clone)]
pub struct Fitness {
    config: ViTConfig,
    batches: Vec<Tensor>,
    targets: Vec<Tensor>,
    loss: LossKind,
    tau: f32,
}

impl Fitness {
    pub fn new(
        fp_model: &Model,
        calib: &Dataset,
        batch_size: usize,
        loss: LossKind,
        tau: f32,
    ) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::param(format!("temperature {tau} must be positive")));
        }
        if loss == LossKind::InfoNce && batch_size < 2 {
            return Err(Error::param("infoNCE needs batches of at least 2 samples"));
        }
        let batches = crate::data::iterate(calib, &BatchPlan::sequential(batch_size))?;
        if batches.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        let targets = batches
            .par_iter()
            .map(|b| fp_model.forward(b, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: *fp_model.config(),
            batches,
            targets,
            loss,
            tau,
        })
    }

    fn check(&self, model: &Model) -> Result<()> {
        if self.config.same_architecture(model.config()) {
            Ok(())
        } else {
            Err(Error::param(
                "quantized and full-precision architectures differ",
            ))
        }
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn batches(&self) -> &[Tensor] {
        &self.batches
    }

    fn reduce(&self, per_batch: Vec<Result<f64>>) -> Result<f64> {
        let mut total = 0.0f64;
        for l in per_batch {
            total += l?;
        }
        let score = total / self.batches.len() as f64;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("{} score {score}", self.loss)));
        }
        Ok(score)
    }

    fn batch_loss(&self, logits: Result<Tensor>, i: usize) -> Result<f64> {
        let logits = logits?;
        let pair = PredictionPair::from_tensors(&logits, &self.targets[i], self.tau)?;
        self.loss.evaluate(&pair)
    }

    /// Mean loss of `model`'s quantized forward over all batches.
    pub fn score(&self, model: &Model) -> Result<f64> {
        self.check(model)?;
        let per_batch = (0..self.batches.len())
            .into_par_iter()
            .map(|i| self.batch_loss(model.forward(&self.batches[i], true), i))
            .collect();
        self.reduce(per_batch)
    }

    /// Caches the quantized residual stream entering `block` so repeated
    /// scoring only recomputes blocks `block..`. The session is valid while
    /// blocks before `block` stay unchanged.
    pub fn session(&self, model: &Model, block: usize) -> Result<Session<'_>> {
        self.check(model)?;
        let hidden = self
            .batches
            .par_iter()
            .map(|b| model.hidden_before(block, b, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Session {
            fitness: self,
            block,
            hidden,
        })
    }
}

pub struct Session<'a> {
    fitness: &'a Fitness,
    block: usize,
    hidden: Vec<Vec<f32>>,
}

impl Session<'_> {
    pub fn block(&self) -> usize {
        self.block
    }

    /// Same value as [`Fitness::score`], bit for bit.
    pub fn score(&self, model: &Model) -> Result<f64> {
        let f = self.fitness;
        let per_batch = (0..f.batches.len())
            .into_par_iter()
            .map(|i| f.batch_loss(model.forward_from(self.block, &self.hidden[i], true), i))
            .collect();
        f.reduce(per_batch)
    }
}

/// One-shot [`Fitness::score`] with the default batch size.
pub fn fitness(
    quant_model: &Model,
    fp_model: &Model,
    calib: &Dataset,
    loss: LossKind,
    tau: f32,
) -> Result<f64> {
    Fitness::new(fp_model, calib, DEFAULT_BATCH_SIZE, loss, tau)?.score(quant_model)
}
