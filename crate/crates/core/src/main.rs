fn main() {
    std::process::exit(opbasis::cli::main_with_args(std::env::args_os()));
}
