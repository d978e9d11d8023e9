use clap::Parser;

fn main() -> anyhow::Result<()> {
    let cli = aspectfsl_cli::Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    aspectfsl_cli::run(cli)
}
