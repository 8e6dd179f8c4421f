use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = elogrid::cli::Cli::parse();
    match elogrid::cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
