fn main() {
    std::process::exit(lawa::cli::run(std::env::args_os()));
}
