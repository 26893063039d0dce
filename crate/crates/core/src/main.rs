fn main() {
    std::process::exit(biasfix::cli::main_with_args(std::env::args_os()));
}
