fn main() {
    std::process::exit(sandpile_core::cli::main_with_args(std::env::args_os()));
}
