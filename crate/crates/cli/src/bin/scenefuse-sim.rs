use clap::Parser;
use scenefuse_cli::commands::{self, GlobalArgs, SimCommand};
use scenefuse_cli::config::FileConfig;
use scenefuse_cli::CliError;

/// Scenario simulator: ground truth, measurement logs and sensor clients.
#[derive(Parser)]
#[command(name = "scenefuse-sim", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: SimCommand,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.global.config.as_deref())?;
    match &cli.command {
        SimCommand::Generate(a) => commands::run_generate(a, &file),
        SimCommand::Observe(a) => commands::run_observe(a, &file),
        SimCommand::Drive(a) => commands::run_drive(a),
    }
}

fn main() {
    let cli = Cli::parse();
    scenefuse_cli::init_logging(&cli.global.log_level);
    if let Err(e) = run(&cli) {
        std::process::exit(scenefuse_cli::report(&e, "scenefuse-sim"));
    }
}
