use std::process::ExitCode;

fn main() -> ExitCode {
    fedcampus_fleet::cli::main_with_args(std::env::args_os())
}
