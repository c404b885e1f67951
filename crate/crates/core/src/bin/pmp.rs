fn main() {
    std::process::exit(pmp::cli::run(std::env::args_os()));
}
