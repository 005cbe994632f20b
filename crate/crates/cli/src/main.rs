use clap::Parser;

fn main() {
    let cli = sbbm_cli::Cli::parse();
    std::process::exit(sbbm_cli::run(&cli));
}
