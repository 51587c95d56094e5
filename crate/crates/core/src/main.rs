fn main() {
    std::process::exit(keyrep::cli::main_with_args(std::env::args_os()));
}
