mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use settings::Settings;

/// Every failure prints one `mqner-error[kind]: message` line on stderr and
/// exits with this code.
const FAILURE: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("mqner-error[usage]: {first}");
            eprint!("{rendered}");
            return ExitCode::from(FAILURE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mqner-error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(FAILURE)
        }
    }
}

fn run(cli: Cli) -> mqner_core::Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(&settings, a),
        Command::Transform(a) => commands::transform(&settings, a),
        Command::Stats(a) => commands::stats(&settings, a),
        Command::Tag(a) => commands::tag(&settings, a),
        Command::Train(a) => commands::train(&settings, a),
        Command::Eval(a) => commands::eval(&settings, a),
        Command::Bench(a) => commands::bench(&settings, a),
    }
}
