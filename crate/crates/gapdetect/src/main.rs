use clap::Parser;

fn main() {
    let cli = gapdetect::cli::Cli::parse();
    std::process::exit(gapdetect::cli::run(cli));
}
