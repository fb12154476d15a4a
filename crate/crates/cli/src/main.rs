use clap::Parser;

fn main() {
    let cli = mrtl_cli::Cli::parse();
    if let Err(e) = mrtl_cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
