use std::process::ExitCode;

fn main() -> ExitCode {
    skd_core::cli::run(std::env::args_os())
}
