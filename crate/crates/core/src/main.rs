fn main() {
    std::process::exit(ballpark::cli::run(std::env::args_os()));
}
