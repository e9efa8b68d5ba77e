use clap::Parser;

fn main() {
    let cli = bang::cli::Cli::parse();
    std::process::exit(bang::cli::run(cli));
}
