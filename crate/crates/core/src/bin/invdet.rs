fn main() {
    std::process::exit(invdet::cli::run(std::env::args_os()));
}
