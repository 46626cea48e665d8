use clap::Parser;
use leapflow::harness::{run, Cli};

fn main() {
    std::process::exit(run(&Cli::parse()));
}
