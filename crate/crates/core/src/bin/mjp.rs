fn main() {
    std::process::exit(mjp::cli::main_with_args(std::env::args_os()));
}
