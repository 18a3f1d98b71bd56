fn main() {
    std::process::exit(desksplat::cli::run(std::env::args()));
}
