use clap::Parser;
use transfer_cli::{dispatch, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("dtl: {e}");
        std::process::exit(e.exit_code());
    }
}
