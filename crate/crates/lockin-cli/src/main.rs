use clap::Parser;

fn main() {
    let cli = lockin_cli::Cli::parse();
    std::process::exit(lockin_cli::run(cli));
}
