use clap::Parser;
use gaitmorph_cli::{init_threads, run, Cli, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let outcome = init_threads().and_then(|()| run(&cli));
    match outcome {
        Ok(line) => println!("{line}"),
        Err(e) => {
            eprintln!("gaitmorph: {e}");
            std::process::exit(e.code);
        }
    }
}
