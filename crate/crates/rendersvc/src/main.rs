use std::process::ExitCode;

fn main() -> ExitCode {
    rendersvc::cli::run(std::env::args_os())
}
