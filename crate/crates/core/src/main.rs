fn main() {
    std::process::exit(fusionseg::cli::run(std::env::args_os()));
}
