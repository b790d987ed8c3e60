fn main() {
    std::process::exit(smoothem::cli::main_with_args(std::env::args_os()));
}
