fn main() {
    std::process::exit(rescrnet::cli::main_with_args(std::env::args_os()));
}
