fn main() {
    std::process::exit(gemfuse::cli::run());
}
