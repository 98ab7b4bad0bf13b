use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(time_drs_cli::run(std::env::args_os()))
}
