use serde::Serialize;

use crate::commands::setup::{self, agreement, save_model};
use crate::config::{RunConfig, SchemeName};
use crate::error::CliResult;
use crate::manifest::{write_json, Manifest};

#[derive(Debug, Serialize)]
struct PointStats {
    block: usize,
    point: String,
    kind: &'static str,
    channels: usize,
    min: f32,
    max: f32,
    mean: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    weight_bits: u8,
    activation_bits: u8,
    scheme: SchemeName,
    bias_correction: bool,
    calib_samples: usize,
    /// Top-1 agreement with the full-precision model on the calibration set.
    calib_agreement: f64,
    model_hash: String,
    points: Vec<PointStats>,
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let s = setup::setup(cfg)?;
    let dir = setup::output_dir(cfg)?;
    let out = dir.join("quantized.evqm");
    save_model(&s.quant, &out)?;

    let mut points = Vec::new();
    for (b, block) in s.quant.blocks().iter().enumerate() {
        for &p in block.points() {
            let scale = block.params(p).scale();
            let kind = match (p.is_weight(), p.is_log2()) {
                (true, _) => "weight",
                (false, true) => "log2 activation",
                (false, false) => "activation",
            };
            points.push(PointStats {
                block: b,
                point: p.to_string(),
                kind,
                channels: scale.len(),
                min: scale.iter().copied().fold(f32::INFINITY, f32::min),
                max: scale.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                mean: scale.iter().map(|&x| x as f64).sum::<f64>() / scale.len() as f64,
            });
        }
    }
    let calib_agreement = agreement(&s.quant, &s.fp, &s.calib)?;
    let report = Report {
        weight_bits: cfg.vit.weight_bits,
        activation_bits: cfg.vit.activation_bits,
        scheme: cfg.quant.scheme,
        bias_correction: cfg.quant.bias_correction,
        calib_samples: s.calib.len(),
        calib_agreement,
        model_hash: s.quant.content_hash(),
        points,
    };
    let report_path = dir.join("quantize-report.json");
    write_json(&report_path, &report)?;

    let mut manifest = Manifest::new("quantize", cfg)?;
    for p in &s.inputs {
        manifest.input(p)?;
    }
    manifest.output(&out)?;
    manifest.output(&report_path)?;
    manifest.write(&dir)?;
    println!(
        "W{}/A{} {:?}: calibration agreement {:.4}, wrote {}",
        report.weight_bits,
        report.activation_bits,
        report.scheme,
        calib_agreement,
        out.display()
    );
    Ok(())
}
