fn main() {
    std::process::exit(bislu_cli::run())
}
