fn main() {
    std::process::exit(mocgvq::cli::run(std::env::args_os()));
}
