use std::process::ExitCode;

fn main() -> ExitCode {
    let code = fairdiff::cli::main_with(std::env::args_os(), &mut std::io::stdout());
    ExitCode::from(code as u8)
}
