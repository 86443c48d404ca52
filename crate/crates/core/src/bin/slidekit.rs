fn main() {
    std::process::exit(slidekit::cli::main_with_args(std::env::args_os()));
}
