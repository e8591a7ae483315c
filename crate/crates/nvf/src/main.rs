use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(nvf::cli::run_from_env())
}
