use clap::Parser;

fn main() {
    let cli = evolq_cli::Cli::parse();
    if let Err(e) = evolq_cli::run(&cli) {
        eprintln!("evolq: {e}");
        std::process::exit(e.exit_code());
    }
}
