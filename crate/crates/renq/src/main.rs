fn main() {
    std::process::exit(renq::cli::run());
}
