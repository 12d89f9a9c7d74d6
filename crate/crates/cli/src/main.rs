use clap::Parser;

use table2vec_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("{}", e.to_json(cli.command.name()));
        std::process::exit(cli.command.exit_code());
    }
}
