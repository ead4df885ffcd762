use clap::Parser;

fn main() {
    let cli = qndsim_cli::cli::Cli::parse();
    std::process::exit(qndsim_cli::cli::run(cli));
}
