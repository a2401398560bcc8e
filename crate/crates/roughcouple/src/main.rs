use clap::Parser;
use roughcouple::cli::{main_with, Cli};

fn main() {
    std::process::exit(main_with(Cli::parse()));
}
