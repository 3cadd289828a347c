fn main() {
    std::process::exit(stochact_cli::run_command(std::env::args_os()));
}
