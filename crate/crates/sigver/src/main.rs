fn main() {
    std::process::exit(sigver::cli::run(std::env::args_os()));
}
