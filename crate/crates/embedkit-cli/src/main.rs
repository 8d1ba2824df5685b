//! Exit codes: 0 success, 1 domain error (JSON on stderr), 2 usage error.

use clap::Parser;

use embedkit_cli::{args::Cli, run};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        e.emit();
        std::process::exit(1);
    }
}
