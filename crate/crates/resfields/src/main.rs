use clap::Parser;
use resfields::cli::{dispatch, Cli};

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            // unreadable or malformed configs are usage errors
            match e {
                resfields::Error::Config(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}
