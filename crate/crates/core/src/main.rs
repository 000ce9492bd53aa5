fn main() {
    std::process::exit(bfcn::cli::run(std::env::args().collect()));
}
