fn main() {
    std::process::exit(pgs::cli::run(std::env::args_os()));
}
