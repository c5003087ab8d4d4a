use clap::Parser;
use scenefuse_cli::commands::{self, EvalArgs, GlobalArgs};
use scenefuse_cli::config::FileConfig;

/// Trajectory evaluation: ATE, RTE, top-5 % error and loss-track ratio.
#[derive(Parser)]
#[command(name = "scenefuse-eval", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(flatten)]
    args: EvalArgs,
}

fn main() {
    let cli = Cli::parse();
    scenefuse_cli::init_logging(&cli.global.log_level);
    let result = FileConfig::load(cli.global.config.as_deref()).and_then(|file| commands::run_eval(&cli.args, &file));
    if let Err(e) = result {
        std::process::exit(scenefuse_cli::report(&e, "scenefuse-eval"));
    }
}
