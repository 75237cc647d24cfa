fn main() {
    std::process::exit(regcopula_cli::cli::main_with(std::env::args_os()));
}
