fn main() {
    std::process::exit(reachguard::cli::run());
}
