use std::process::ExitCode;

fn main() -> ExitCode {
    pfode_cli::run()
}
