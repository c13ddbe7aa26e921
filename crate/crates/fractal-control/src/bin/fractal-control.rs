use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fractal_control::cli::run(std::env::args_os()))
}
