fn main() {
    std::process::exit(sabr::bench::cli::run(std::env::args()));
}
