fn main() {
    std::process::exit(twistlog::cli::run());
}
