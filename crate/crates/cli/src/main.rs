use clap::Parser;
use latentflow_cli::{run, Cli, EXIT_ASSERT};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if !run(cli)? {
        eprintln!("assertion failed: at least one directional check did not hold");
        std::process::exit(EXIT_ASSERT);
    }
    Ok(())
}
