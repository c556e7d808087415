use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use evolq_core::landscape::{
    default_directions, probe, roughness, Direction, LandscapeGrid, ProbeSpec,
};

use crate::commands::setup;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let s = setup::setup(cfg)?;
    let l = &cfg.landscape;
    let eval = s.eval.slice(0..l.eval_size.min(s.eval.len()))?;
    let fitness = setup::fitness(cfg, &s.fp, &eval, cfg.loss.kind)?;
    let mut model = s.quant;
    let (default_a, default_b) = default_directions(&model, l.block)?;
    let spec = ProbeSpec {
        block: l.block,
        direction_a: l
            .direction_a
            .map(Direction::Coordinate)
            .unwrap_or(default_a),
        direction_b: l
            .direction_b
            .map(Direction::Coordinate)
            .unwrap_or(default_b),
        half_range: l.range.unwrap_or(10.0 * cfg.epsilon()),
        steps: l.steps,
    };
    let mut grid = probe(&mut model, &fitness, &spec)?;
    let rough = roughness(&grid);
    grid.metadata.push(("seed".into(), cfg.seed.to_string()));
    grid.metadata
        .push(("eval_samples".into(), eval.len().to_string()));
    grid.metadata.push(("roughness".into(), rough.to_string()));

    let dir = setup::output_dir(cfg)?;
    let mut manifest = Manifest::new("landscape", cfg)?;
    for p in &s.inputs {
        manifest.input(p)?;
    }
    let csv = dir.join("landscape.csv");
    write_with(&csv, |out| grid.write_csv(out))?;
    manifest.output(&csv)?;
    if l.pgm {
        let pgm = dir.join("landscape.pgm");
        write_with(&pgm, |out| grid.write_pgm(out))?;
        manifest.output(&pgm)?;
    }
    manifest.write(&dir)?;
    print_summary(&grid, rough);
    Ok(())
}

fn write_with(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(path, e))
}

fn print_summary(grid: &LandscapeGrid, rough: f64) {
    let (lo, hi) = grid
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    println!(
        "{0}x{0} grid: center {1:.6}, range [{2:.6}, {3:.6}], roughness {4:.4}",
        grid.steps,
        grid.center(),
        lo,
        hi,
        rough
    );
}
