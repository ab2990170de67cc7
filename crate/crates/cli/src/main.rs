use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(trfs_cli::run_args(std::env::args_os(), &mut std::io::stdout()))
}
