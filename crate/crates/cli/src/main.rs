use clap::Parser;
use rolling_lab_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let env_threads = std::env::var("ROLLING_LAB_THREADS").ok();
    std::process::exit(run(&cli, env_threads.as_deref()));
}
