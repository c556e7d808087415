use evolq_core::landscape::{
    compare_optimizers, ComparisonSettings, EggCarton, OptimizerComparison,
};
use evolq_core::search::Optimizer;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::setup;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, Manifest};

#[derive(Debug, Serialize)]
struct Wins {
    optimizer: Optimizer,
    /// Seeds where ES ended strictly lower.
    es_wins: usize,
    mean_loss: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    seeds: usize,
    dim: usize,
    omega: f64,
    /// Evaluations actually spent per method: steps · 2 · dim.
    budget: usize,
    steps: usize,
    lr: f64,
    epsilon: f64,
    es_mean_loss: f64,
    versus: Vec<Wins>,
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let c = &cfg.compare;
    let steps = c.budget / (2 * c.dim);
    let results = (0..c.seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            let surface = EggCarton::new(c.dim, c.omega, c.amplitude, c.quadratic, seed)?;
            let settings = ComparisonSettings {
                steps,
                lr: c.lr,
                epsilon: c.epsilon,
                spread: c.spread,
                seed,
            };
            Ok((seed, compare_optimizers(&surface, &settings)?))
        })
        .collect::<CliResult<Vec<(u64, OptimizerComparison)>>>()?;

    let dir = setup::output_dir(cfg)?;
    let names: Vec<String> = Optimizer::ALL.iter().map(|o| o.to_string()).collect();
    let mut csv = format!("seed,start,es,{}\n", names.join(","));
    println!(
        "{:>6} {:>12} {:>12} {}",
        "seed",
        "start",
        "es",
        names.iter().map(|n| format!("{n:>12}")).collect::<String>()
    );
    for (seed, r) in &results {
        let grads: Vec<String> = r.gradient.iter().map(|(_, v)| v.to_string()).collect();
        csv.push_str(&format!(
            "{seed},{},{},{}\n",
            r.start,
            r.es,
            grads.join(",")
        ));
        let cols: String = r
            .gradient
            .iter()
            .map(|(_, v)| format!(" {v:>12.6}"))
            .collect();
        println!("{seed:>6} {:>12.6} {:>12.6}{cols}", r.start, r.es);
    }
    let n = results.len() as f64;
    let versus: Vec<Wins> = Optimizer::ALL
        .iter()
        .enumerate()
        .map(|(k, &optimizer)| Wins {
            optimizer,
            es_wins: results
                .iter()
                .filter(|(_, r)| r.es < r.gradient[k].1)
                .count(),
            mean_loss: results.iter().map(|(_, r)| r.gradient[k].1).sum::<f64>() / n,
        })
        .collect();
    for w in &versus {
        println!("es beats {}: {}/{}", w.optimizer, w.es_wins, results.len());
    }
    let summary = Summary {
        seeds: c.seeds,
        dim: c.dim,
        omega: c.omega,
        budget: steps * 2 * c.dim,
        steps,
        lr: c.lr,
        epsilon: c.epsilon,
        es_mean_loss: results.iter().map(|(_, r)| r.es).sum::<f64>() / n,
        versus,
    };
    let csv_path = dir.join("compare-opt.csv");
    std::fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;
    let summary_path = dir.join("compare-opt-summary.json");
    write_json(&summary_path, &summary)?;
    let mut manifest = Manifest::new("compare-opt", cfg)?;
    manifest.output(&csv_path)?;
    manifest.output(&summary_path)?;
    manifest.write(&dir)?;
    Ok(())
}
