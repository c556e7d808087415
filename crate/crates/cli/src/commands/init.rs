use evolq_core::model::Model;

use crate::cli::InitArgs;
use crate::commands::setup::{passthrough, save_model};
use crate::commands::synth::parent;
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::manifest::Manifest;

pub fn run(cfg: &RunConfig, args: &InitArgs) -> CliResult<()> {
    let model = Model::init(passthrough(cfg.vit), cfg.seed)?;
    save_model(&model, &args.out)?;
    let mut manifest = Manifest::new("init", cfg)?;
    manifest.output(&args.out)?;
    manifest.write(parent(&args.out))?;
    println!("wrote {} ({})", args.out.display(), model.content_hash());
    Ok(())
}
