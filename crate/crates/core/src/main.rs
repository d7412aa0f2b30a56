fn main() {
    std::process::exit(kvcoreset::cli::main_with_args(std::env::args_os()));
}
