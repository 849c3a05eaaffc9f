use clap::error::ErrorKind;
use clap::Parser;

use spinterp_cli::commands::first_line;
use spinterp_cli::{run, Cli, CliError};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return;
        }
        Err(e) => fail(CliError::Usage(first_line(&e.to_string()))),
    };
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ! {
    eprintln!("{}", e.to_line());
    std::process::exit(e.exit_code());
}
