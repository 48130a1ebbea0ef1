fn main() {
    std::process::exit(proattention::cli::run(std::env::args_os()));
}
