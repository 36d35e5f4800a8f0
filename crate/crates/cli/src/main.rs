use clap::Parser;

fn main() {
    let cli = audioadapt_cli::Cli::parse();
    if let Err(e) = audioadapt_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
