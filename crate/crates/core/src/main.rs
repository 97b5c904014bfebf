fn main() {
    std::process::exit(arraycal::cli::main_with_args(std::env::args_os()));
}
