use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use evolq_core::losses::{top1_agreement, LossKind};
use evolq_core::model::Model;
use evolq_core::search::{run_traced, write_trace_csv};
use rayon::prelude::*;
use serde::Serialize;

use crate::cli::bad_value;
use crate::commands::setup::{self, save_model};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, Manifest};

#[derive(Debug, Clone, Serialize)]
pub struct SearchSummary {
    pub seed: u64,
    pub loss: LossKind,
    pub passes: usize,
    pub population: usize,
    pub cycles: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub calib_samples: usize,
    pub eval_samples: usize,
    pub evaluations: usize,
    /// Calibration loss before and after the search.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Top-1 agreement with the full-precision model on the held-out set.
    pub agreement_before: f64,
    pub agreement_after: f64,
    pub input_hash: String,
    pub output_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
}

pub fn run(cfg: &RunConfig, sweep: Option<&str>) -> CliResult<()> {
    let dir = setup::output_dir(cfg)?;
    match sweep {
        None => {
            let s = search_into(cfg, &dir)?;
            println!(
                "loss {:.6} -> {:.6}, agreement {:.4} -> {:.4}, {} evaluations",
                s.initial_loss, s.final_loss, s.agreement_before, s.agreement_after, s.evaluations
            );
            Ok(())
        }
        Some(spec) => run_sweep(cfg, &dir, spec),
    }
}

/// One search writing `searched.evqm`, `trace.csv`, `search-summary.json`
/// and the manifest into `dir`.
pub fn search_into(cfg: &RunConfig, dir: &Path) -> CliResult<SearchSummary> {
    let started = Instant::now();
    let s = setup::setup(cfg)?;
    let fitness = setup::fitness(cfg, &s.fp, &s.calib, cfg.loss.kind)?;
    let settings = cfg.search_settings();
    let mut model = s.quant;
    let input_hash = model.content_hash();
    let reference = s.fp.forward(s.eval.samples(), false)?;
    let agreement = |m: &Model| -> CliResult<f64> {
        Ok(top1_agreement(
            &m.forward(s.eval.samples(), true)?,
            &reference,
        )?)
    };
    let agreement_before = agreement(&model)?;
    let report = run_traced(&mut model, &fitness, &settings, cfg.timing, &mut |_| {})?;
    let agreement_after = agreement(&model)?;

    let model_path = dir.join("searched.evqm");
    save_model(&model, &model_path)?;
    let trace_path = dir.join("trace.csv");
    let file = File::create(&trace_path).map_err(|e| CliError::io(&trace_path, e))?;
    let mut out = BufWriter::new(file);
    write_trace_csv(&report.trace, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(&trace_path, e))?;

    let summary = SearchSummary {
        seed: cfg.seed,
        loss: cfg.loss.kind,
        passes: settings.passes,
        population: settings.population,
        cycles: settings.cycles,
        samples: settings.samples,
        epsilon: settings.epsilon,
        calib_samples: s.calib.len(),
        eval_samples: s.eval.len(),
        evaluations: report.evaluations,
        initial_loss: report.initial_score,
        final_loss: report.final_score,
        agreement_before,
        agreement_after,
        input_hash,
        output_hash: model.content_hash(),
        elapsed_seconds: cfg.timing.then(|| started.elapsed().as_secs_f64()),
    };
    let summary_path = dir.join("search-summary.json");
    write_json(&summary_path, &summary)?;

    let mut manifest = Manifest::new("search", cfg)?;
    for p in &s.inputs {
        manifest.input(p)?;
    }
    for p in [&model_path, &trace_path, &summary_path] {
        manifest.output(p)?;
    }
    manifest.write(dir)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SweepKey {
    Passes,
    Population,
    Cycles,
    Samples,
    Epsilon,
    Calib,
}

impl SweepKey {
    fn parse(name: &str) -> CliResult<Self> {
        Ok(match name {
            "passes" => SweepKey::Passes,
            "population" => SweepKey::Population,
            "cycles" => SweepKey::Cycles,
            "samples" => SweepKey::Samples,
            "epsilon" => SweepKey::Epsilon,
            "calib" => SweepKey::Calib,
            _ => return Err(bad_value("sweep key", name)),
        })
    }

    fn apply(self, cfg: &mut RunConfig, value: &str) -> CliResult<()> {
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| bad_value("sweep value", value))
        };
        match self {
            SweepKey::Passes => cfg.search.passes = count()?,
            SweepKey::Population => cfg.search.population = count()?,
            SweepKey::Cycles => cfg.search.cycles = count()?,
            SweepKey::Samples => cfg.search.samples = count()?,
            SweepKey::Calib => cfg.data.calib_size = count()?,
            SweepKey::Epsilon => {
                cfg.search.epsilon =
                    Some(value.parse().map_err(|_| bad_value("sweep value", value))?);
            }
        }
        Ok(())
    }
}

/// Parses `key=v1,v2,...`.
fn parse_sweep(spec: &str) -> CliResult<(String, SweepKey, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| bad_value("sweep", spec))?;
    let key = key.trim();
    let parsed = SweepKey::parse(key)?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(|v| v.is_empty()) {
        return Err(bad_value("sweep", spec));
    }
    Ok((key.to_string(), parsed, values))
}

/// Runs one search per value into `sweep-<key>-<value>/` and tabulates the
/// outcomes in `sweep.csv`. The runs are independent and may run in
/// parallel; results are written in the order given.
fn run_sweep(cfg: &RunConfig, dir: &Path, spec: &str) -> CliResult<()> {
    let (name, key, values) = parse_sweep(spec)?;
    if key == SweepKey::Calib && cfg.paths.calib.is_some() {
        return Err(CliError::config(
            "a calibration-size sweep needs synthetic calibration data",
        ));
    }
    let mut runs = Vec::with_capacity(values.len());
    for v in &values {
        let mut c = cfg.clone();
        key.apply(&mut c, v)?;
        c.validate()?;
        let sub = dir.join(format!("sweep-{name}-{v}"));
        std::fs::create_dir_all(&sub).map_err(|e| CliError::io(&sub, e))?;
        runs.push((c, sub));
    }
    let summaries = runs
        .par_iter()
        .map(|(c, sub)| search_into(c, sub))
        .collect::<CliResult<Vec<_>>>()?;

    let table_path = dir.join("sweep.csv");
    let mut text =
        format!("{name},initial_loss,final_loss,agreement_before,agreement_after,evaluations\n");
    for (v, s) in values.iter().zip(&summaries) {
        text.push_str(&format!(
            "{v},{},{},{},{},{}\n",
            s.initial_loss, s.final_loss, s.agreement_before, s.agreement_after, s.evaluations
        ));
        println!(
            "{name}={v}: loss {:.6} -> {:.6}, agreement {:.4} -> {:.4}",
            s.initial_loss, s.final_loss, s.agreement_before, s.agreement_after
        );
    }
    std::fs::write(&table_path, text).map_err(|e| CliError::io(&table_path, e))?;
    let mut manifest = Manifest::new("search-sweep", cfg)?;
    manifest.output(&table_path)?;
    for (_, sub) in &runs {
        manifest.output(&sub.join("searched.evqm"))?;
    }
    manifest.write(dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_spec_parsing() {
        let (name, key, values) = parse_sweep("passes=1, 5,10").unwrap();
        assert_eq!((name.as_str(), key), ("passes", SweepKey::Passes));
        assert_eq!(values, ["1", "5", "10"]);
        assert!(parse_sweep("passes").is_err());
        assert!(parse_sweep("depth=1").is_err());
        assert!(parse_sweep("passes=1,,2").is_err());
        let mut cfg = RunConfig::default();
        SweepKey::Calib.apply(&mut cfg, "64").unwrap();
        assert_eq!(cfg.data.calib_size, 64);
        SweepKey::Epsilon.apply(&mut cfg, "0.01").unwrap();
        assert_eq!(cfg.epsilon(), 0.01);
        assert!(SweepKey::Passes.apply(&mut cfg, "x").is_err());
    }
}
