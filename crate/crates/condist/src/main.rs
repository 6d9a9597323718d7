fn main() {
    std::process::exit(condist::cli::run_from(std::env::args_os()));
}
