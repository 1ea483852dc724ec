fn main() {
    std::process::exit(orthocl_core::cli::main_with_args(std::env::args_os()));
}
