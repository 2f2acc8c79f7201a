fn main() {
    std::process::exit(specsim::cli::main_with_args(std::env::args_os()));
}
