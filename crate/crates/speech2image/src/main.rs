use clap::Parser;

fn main() {
    let cli = speech2image::cli::Cli::parse();
    std::process::exit(speech2image::cli::run(cli));
}
