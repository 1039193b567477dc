use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(qsgp_cli::run(std::env::args_os()))
}
