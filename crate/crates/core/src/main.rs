fn main() {
    std::process::exit(interpdn_core::cli::main_with_args(std::env::args_os()));
}
