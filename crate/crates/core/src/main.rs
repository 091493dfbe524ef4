use clap::Parser;

fn main() {
    let cli = basketbound::cli::Cli::parse();
    std::process::exit(basketbound::cli::run(cli));
}
