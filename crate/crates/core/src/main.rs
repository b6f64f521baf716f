fn main() {
    std::process::exit(ee2d::cli::run());
}
