fn main() {
    std::process::exit(mcfuse::cli::run(std::env::args_os()));
}
