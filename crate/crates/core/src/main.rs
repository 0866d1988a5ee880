use clap::Parser;

use gatefuse::cli::{error_line, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", error_line(&err));
        std::process::exit(err.exit_code());
    }
}
