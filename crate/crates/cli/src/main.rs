use std::process::ExitCode;

use clap::Parser;
use crowdda_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("crowdda {}: {e}", cli.command_name());
            if let crowdda::Error::NumericalAbort { snapshot, .. } = &e {
                for (name, value) in snapshot {
                    eprintln!("  {name} = {value}");
                }
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
