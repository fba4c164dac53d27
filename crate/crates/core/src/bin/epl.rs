fn main() {
    std::process::exit(epl::cli::main_with_args(std::env::args_os()));
}
