use std::collections::BTreeMap;

use evolq_core::losses::LossKind;
use evolq_core::model::Model;
use evolq_core::Tensor;
use serde::Serialize;

use crate::commands::setup::{self, agreement};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::manifest::{write_json, Manifest};

#[derive(Debug, Serialize)]
struct Metrics {
    samples: usize,
    batch_size: usize,
    tau: f32,
    /// Top-1 agreement of the quantized forward with the reference.
    agreement: f64,
    /// Batch-averaged losses against the reference, keyed by loss name.
    losses: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_label_accuracy: Option<f64>,
    model_hash: String,
    reference_hash: String,
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let s = setup::setup(cfg)?;
    let mut losses = BTreeMap::new();
    for kind in LossKind::ALL {
        let f = setup::fitness(cfg, &s.fp, &s.eval, kind)?;
        losses.insert(kind.to_string(), f.score(&s.quant)?);
    }
    let accuracy = |m: &Model, quantized: bool| -> CliResult<Option<f64>> {
        let Some(labels) = s.eval.labels() else {
            return Ok(None);
        };
        let logits = m.forward(s.eval.samples(), quantized)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(&logits, i) == y as usize)
            .count();
        Ok(Some(hits as f64 / labels.len() as f64))
    };
    let metrics = Metrics {
        samples: s.eval.len(),
        batch_size: cfg.loss.batch_size,
        tau: cfg.loss.tau,
        agreement: agreement(&s.quant, &s.fp, &s.eval)?,
        losses,
        label_accuracy: accuracy(&s.quant, true)?,
        reference_label_accuracy: accuracy(&s.fp, false)?,
        model_hash: s.quant.content_hash(),
        reference_hash: s.fp.content_hash(),
    };
    let dir = setup::output_dir(cfg)?;
    let path = dir.join("eval-metrics.json");
    write_json(&path, &metrics)?;
    let mut manifest = Manifest::new("eval", cfg)?;
    for p in &s.inputs {
        manifest.input(p)?;
    }
    manifest.output(&path)?;
    manifest.write(&dir)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&metrics).expect("metrics serialize")
    );
    Ok(())
}

fn argmax(logits: &Tensor, row: usize) -> usize {
    let c = logits.shape()[1];
    let r = &logits.data()[row * c..(row + 1) * c];
    (0..c).fold(0, |b, j| if r[j] > r[b] { j } else { b })
}
