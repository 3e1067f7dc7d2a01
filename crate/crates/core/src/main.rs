use std::io::Write;

use clap::Parser;

fn main() {
    let cli = match qdmpc::cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { qdmpc::cli::EXIT_INPUT } else { qdmpc::cli::EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let out = qdmpc::cli::run(cli);
    let _ = std::io::stdout().write_all(out.stdout.as_bytes());
    let _ = std::io::stderr().write_all(out.stderr.as_bytes());
    std::process::exit(out.code);
}
