use clap::Parser;

fn main() {
    let cli = ssnn_cli::Cli::parse();
    if let Err(e) = ssnn_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
