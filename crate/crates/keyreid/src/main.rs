use std::process::exit;

use clap::Parser;
use keyreid::cli::{self, Cli};

fn main() {
    if let Ok(threads) = std::env::var("KEYREID_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: KEYREID_THREADS must be a positive integer");
                exit(1);
            }
        }
    }
    match Cli::try_parse() {
        Ok(parsed) => match cli::run(parsed) {
            Ok(()) => {}
            Err(e) => {
                eprintln!("error: {e}");
                exit(e.exit_code());
            }
        },
        Err(e) => {
            // --help/--version land here too; those exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            exit(code);
        }
    }
}
