fn main() {
    std::process::exit(expotwist::cli::main_with_args(std::env::args_os()));
}
