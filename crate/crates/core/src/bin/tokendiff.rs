fn main() {
    std::process::exit(tokendiff::cli::run(std::env::args_os()));
}
