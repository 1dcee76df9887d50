fn main() {
    std::process::exit(care_core::cli::run(std::env::args_os()));
}
