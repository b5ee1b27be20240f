fn main() {
    std::process::exit(splitnet::cli::run(std::env::args_os()));
}
