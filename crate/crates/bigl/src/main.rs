fn main() {
    std::process::exit(bigl::cli::run(std::env::args()));
}
