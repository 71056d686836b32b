use clap::Parser;

fn main() {
    env_logger::init();
    let cli = rf_net::cli::Cli::parse();
    std::process::exit(rf_net::cli::run(cli));
}
