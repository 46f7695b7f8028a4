use clap::Parser;
use sptseg_cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
