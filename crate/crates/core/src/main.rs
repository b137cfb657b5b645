fn main() {
    std::process::exit(clipflow::cli::run(std::env::args_os()));
}
