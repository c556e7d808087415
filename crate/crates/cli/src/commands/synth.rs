use evolq_core::data::synth_dataset;

use crate::cli::SynthArgs;
use crate::commands::setup::DATA_SEED_OFFSET;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn run(cfg: &RunConfig, args: &SynthArgs) -> CliResult<()> {
    let count = args.count.unwrap_or(cfg.data.eval_size);
    if count == 0 {
        return Err(CliError::config("count must be positive"));
    }
    let v = &cfg.vit;
    let ds = synth_dataset(
        count,
        v.tokens,
        v.embed_dim,
        v.classes,
        cfg.seed.wrapping_add(DATA_SEED_OFFSET),
        cfg.data.separation,
    )?;
    ds.save(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut manifest = Manifest::new("synth", cfg)?;
    manifest.output(&args.out)?;
    manifest.write(parent(&args.out))?;
    println!("wrote {count} samples to {}", args.out.display());
    Ok(())
}

pub(crate) fn parent(path: &std::path::Path) -> &std::path::Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => std::path::Path::new("."),
    }
}
