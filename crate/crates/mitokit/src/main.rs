fn main() {
    std::process::exit(mitokit::cli::run());
}
