fn main() {
    std::process::exit(smpkit::cli::main_with_args(std::env::args_os()));
}
