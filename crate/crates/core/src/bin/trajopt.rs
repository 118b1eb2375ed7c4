fn main() {
    std::process::exit(trajopt::cli::main_with_args(std::env::args_os()));
}
