use clap::{Parser, Subcommand};
use scenefuse_cli::commands::{self, EvalArgs, GlobalArgs, ServeArgs, SimCommand};
use scenefuse_cli::config::FileConfig;
use scenefuse_cli::repro::{self, ReproArgs};
use scenefuse_cli::CliError;

/// Multi-sensor tracking fusion over a dynamic scene graph.
#[derive(Parser)]
#[command(name = "scenefuse", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fusion server.
    Serve(ServeArgs),
    /// Simulate, observe and drive scenarios.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Evaluate estimate logs against ground truth.
    Eval(EvalArgs),
    /// Simulate, stream through a local server, evaluate and check.
    Repro(ReproArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.global.config.as_deref())?;
    match &cli.command {
        Command::Serve(a) => commands::run_serve(a, &file),
        Command::Sim(SimCommand::Generate(a)) => commands::run_generate(a, &file),
        Command::Sim(SimCommand::Observe(a)) => commands::run_observe(a, &file),
        Command::Sim(SimCommand::Drive(a)) => commands::run_drive(a),
        Command::Eval(a) => commands::run_eval(a, &file),
        Command::Repro(a) => {
            let outcome = repro::run(a, &file)?;
            print!("{}", outcome.table);
            println!();
            for c in &outcome.checks {
                println!("{c}");
            }
            match outcome.checks.iter().filter(|c| !c.passed).count() {
                0 => Ok(()),
                failed => Err(CliError::ChecksFailed { failed }),
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    scenefuse_cli::init_logging(&cli.global.log_level);
    if let Err(e) = run(&cli) {
        std::process::exit(scenefuse_cli::report(&e, "scenefuse"));
    }
}
