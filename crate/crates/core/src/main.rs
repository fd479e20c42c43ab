fn main() -> std::process::ExitCode {
    mpbm::cli::main_with_args(std::env::args_os())
}
