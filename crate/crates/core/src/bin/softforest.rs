fn main() {
    std::process::exit(softforest::cli::run(std::env::args_os()));
}
