use clap::Parser;

fn main() {
    let cli = tabmda_cli::Cli::parse();
    if let Err(e) = tabmda_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
