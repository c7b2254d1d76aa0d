fn main() {
    std::process::exit(deltakv::cli::run(std::env::args().collect()));
}
