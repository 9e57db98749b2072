fn main() {
    std::process::exit(embrank::cli::main_with_args(std::env::args_os()));
}
