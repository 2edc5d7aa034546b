use std::process::ExitCode;

fn main() -> ExitCode {
    context_lens::cli::run()
}
