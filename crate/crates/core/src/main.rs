fn main() {
    std::process::exit(mixsup::cli::run(std::env::args_os()));
}
