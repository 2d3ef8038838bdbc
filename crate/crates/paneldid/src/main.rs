use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(paneldid::cli::run())
}
