fn main() {
    std::process::exit(naima::cli::run_from(std::env::args_os()));
}
