use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use limper_cli::{run, Command, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "limper", about = "Spectral pipelines for polyharmonic operators with limit-periodic potentials")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    steps: Option<u32>,
    /// `key=value` with a TOML value; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = RunOptions { config: args.config, out_dir: args.out_dir, steps: args.steps, overrides: args.overrides };
    match run(args.command, &opts) {
        Ok(m) => {
            for a in &m.outputs {
                println!("{}  {}", a.sha256, a.path);
            }
            for c in m.checks.iter().filter(|c| !c.pass) {
                eprintln!("warning: check {} failed ({})", c.name, c.detail);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
