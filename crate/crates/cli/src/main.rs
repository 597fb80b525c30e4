use std::process::ExitCode;

fn main() -> ExitCode {
    match maskprior_cli::dispatch(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
