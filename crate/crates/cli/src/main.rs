use clap::Parser;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = fjsp_cli::Cli::parse();
    if let Err(e) = fjsp_cli::run(cli, argv) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
