fn main() {
    std::process::exit(step_cli::main_with_args(std::env::args_os()));
}
