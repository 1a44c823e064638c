fn main() {
    std::process::exit(abstention::cli::run(std::env::args_os()));
}
