use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use dualfuse::cli::{error_line, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            // the subcommand name, if one was given
            let name = std::env::args()
                .skip(1)
                .find(|a| Cli::command_names().iter().any(|n| n == a))
                .unwrap_or_else(|| "none".into());
            let msg = e.kind().to_string();
            println!("{}", error_line(&name, &format!("usage: {msg}")));
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    let mut stdout = std::io::stdout();
    match run(&cli, &mut stdout) {
        Ok(st) => {
            println!("{}", st.line(name));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!("{}", error_line(name, &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
