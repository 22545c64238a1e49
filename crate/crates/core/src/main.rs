use std::process::ExitCode;

fn main() -> ExitCode {
    conformal_claims::cli::run(std::env::args_os())
}
