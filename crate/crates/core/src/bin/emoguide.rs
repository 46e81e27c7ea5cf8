use clap::Parser;
use emoguide::cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(summary) => {
            for line in &summary.report {
                println!("{line}");
            }
            println!("run directory: {}", summary.run_dir.display());
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {:#}", anyhow::Error::from(e));
            std::process::exit(code);
        }
    }
}
