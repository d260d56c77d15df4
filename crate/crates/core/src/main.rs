fn main() {
    std::process::exit(evlign::cli::run_from(std::env::args_os()));
}
