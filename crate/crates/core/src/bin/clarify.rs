fn main() {
    std::process::exit(clarify_core::cli::run(std::env::args_os()));
}
