fn main() {
    std::process::exit(ndmag::cli::run());
}
