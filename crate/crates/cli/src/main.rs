use std::process::ExitCode;

fn main() -> ExitCode {
    reid_cli::main_with(std::env::args_os())
}
