//! Command-line surface. Flags override `EVQ_SEED`, which overrides the
//! config file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use evolq_core::losses::LossKind;

use crate::config::{RunConfig, SchemeName};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "evolq",
    version,
    about = "Post-training quantization with evolutionary scale search"
)]
pub struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for batch-parallel scoring.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Directory receiving outputs and the manifest.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Write a randomly initialized full-precision model.
    Init(InitArgs),
    /// Quantize a full-precision model and fit its scales.
    Quantize(QuantizeArgs),
    /// Block-wise evolutionary search over the quantization scales.
    Search(SearchArgs),
    /// Probe the loss on a 2-D grid of scale perturbations.
    Landscape(LandscapeArgs),
    /// Compare evolutionary search with gradient descent on egg-carton surfaces.
    CompareOpt(CompareArgs),
    /// Agreement and losses of a quantized model against its reference.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Sample count; the configured evaluation size when omitted.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub separation: Option<f32>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Full-precision input; the seeded initialization when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long)]
    pub activation_bits: Option<u8>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeName>,
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub bias_correction: bool,
}

/// Model, data and loss selection shared by the scoring commands.
#[derive(Debug, Args)]
pub struct ScoringArgs {
    /// Quantized model; built from the full-precision one when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Full-precision reference; defaults to the quantized model's own
    /// unquantized forward when only `--model` is given.
    #[arg(long)]
    pub fp_model: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub tau: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Record wall-clock time per trace row.
    #[arg(long)]
    pub timing: bool,
    /// Repeat the search over values of one setting, e.g. `passes=1,5,10`.
    /// Keys: passes, population, cycles, samples, epsilon, calib.
    #[arg(long)]
    pub sweep: Option<String>,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Half range of each axis.
    #[arg(long)]
    pub range: Option<f64>,
    /// Scale coordinate within the block for the first axis.
    #[arg(long)]
    pub dir_a: Option<usize>,
    #[arg(long)]
    pub dir_b: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub no_pgm: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Function evaluations per method.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Dataset to score on; the configured evaluation set when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl ScoringArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set_opt(&mut cfg.paths.model, self.model.clone());
        set_opt(&mut cfg.paths.fp_model, self.fp_model.clone());
        set_opt(&mut cfg.paths.calib, self.calib.clone());
        set_opt(&mut cfg.paths.eval, self.eval.clone());
        set(&mut cfg.loss.kind, self.loss);
        set(&mut cfg.loss.tau, self.tau);
        set(&mut cfg.loss.batch_size, self.batch_size);
    }
}

impl Cli {
    /// The effective configuration for this invocation, validated.
    pub fn settle(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        set(&mut cfg.seed, self.seed);
        set_opt(&mut cfg.threads, self.threads);
        set(&mut cfg.output_dir, self.out_dir.clone());
        match &self.command {
            Command::Synth(a) => set(&mut cfg.data.separation, a.separation),
            Command::Init(_) => {}
            Command::Quantize(a) => {
                set_opt(&mut cfg.paths.fp_model, a.model.clone());
                set_opt(&mut cfg.paths.calib, a.calib.clone());
                set(&mut cfg.vit.weight_bits, a.bits);
                set(&mut cfg.vit.activation_bits, a.activation_bits);
                set(&mut cfg.quant.scheme, a.scheme);
                set(&mut cfg.quant.percentile, a.percentile);
                cfg.quant.bias_correction |= a.bias_correction;
                // The input here is the full-precision model.
                cfg.paths.model = None;
            }
            Command::Search(a) => {
                a.scoring.apply(&mut cfg);
                set(&mut cfg.search.passes, a.passes);
                set(&mut cfg.search.population, a.population);
                set(&mut cfg.search.cycles, a.cycles);
                set(&mut cfg.search.samples, a.samples);
                set_opt(&mut cfg.search.epsilon, a.epsilon);
                cfg.timing |= a.timing;
            }
            Command::Landscape(a) => {
                a.scoring.apply(&mut cfg);
                let l = &mut cfg.landscape;
                set(&mut l.block, a.block);
                set(&mut l.steps, a.steps);
                set_opt(&mut l.range, a.range);
                set_opt(&mut l.direction_a, a.dir_a);
                set_opt(&mut l.direction_b, a.dir_b);
                set(&mut l.eval_size, a.eval_size);
                l.pgm &= !a.no_pgm;
            }
            Command::CompareOpt(a) => {
                let c = &mut cfg.compare;
                set(&mut c.budget, a.budget);
                set(&mut c.seeds, a.seeds);
                set(&mut c.dim, a.dim);
                set(&mut c.omega, a.omega);
                set(&mut c.lr, a.lr);
                set(&mut c.epsilon, a.epsilon);
            }
            Command::Eval(a) => {
                a.scoring.apply(&mut cfg);
                set_opt(&mut cfg.paths.eval, a.data.clone());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses the arguments after the program name and runs the command.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.settle()?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, e.g. in tests; keep that one.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    use crate::commands as c;
    match &cli.command {
        Command::Synth(a) => c::synth::run(&cfg, a),
        Command::Init(a) => c::init::run(&cfg, a),
        Command::Quantize(_) => c::quantize::run(&cfg),
        Command::Search(a) => c::search::run(&cfg, a.sweep.as_deref()),
        Command::Landscape(_) => c::landscape::run(&cfg),
        Command::CompareOpt(_) => c::compare::run(&cfg),
        Command::Eval(_) => c::eval::run(&cfg),
    }
}

pub(crate) fn bad_value(what: &str, value: &str) -> CliError {
    CliError::config(format!("invalid {what}: {value:?}"))
}
