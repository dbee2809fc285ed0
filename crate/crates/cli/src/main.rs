fn main() {
    std::process::exit(cife_cli::main_with(std::env::args_os()));
}
