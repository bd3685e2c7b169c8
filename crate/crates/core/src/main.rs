fn main() {
    std::process::exit(vispose::cli::run(std::env::args_os()));
}
