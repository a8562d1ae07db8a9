use clap::Parser;

fn main() {
    let cli = perfowave_cli::Cli::parse();
    std::process::exit(perfowave_cli::dispatch(cli));
}
