fn main() {
    std::process::exit(lest_cli::main_with(std::env::args_os()));
}
