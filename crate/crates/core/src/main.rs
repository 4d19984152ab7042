fn main() {
    std::process::exit(psbma::cli::run(std::env::args_os()));
}
