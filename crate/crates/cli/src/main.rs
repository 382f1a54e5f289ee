fn main() {
    std::process::exit(geocl_cli::main_with_args(std::env::args_os()));
}
