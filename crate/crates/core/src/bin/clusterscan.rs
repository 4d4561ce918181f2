fn main() {
    std::process::exit(clusterscan::cli::run());
}
