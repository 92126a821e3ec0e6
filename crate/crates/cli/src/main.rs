fn main() {
    std::process::exit(fedmoe_cli::main_with_args(std::env::args_os()));
}
