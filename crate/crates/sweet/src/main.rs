fn main() {
    std::process::exit(sweet::cli::run());
}
