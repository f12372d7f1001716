use clap::Parser;
use selfexplain_cli::{execute, exit, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcome) => {
            for line in outcome.lines {
                println!("{line}");
            }
            std::process::exit(exit::OK);
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit::exit_code(&err));
        }
    }
}
