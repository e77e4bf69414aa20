fn main() {
    std::process::exit(spot_mamba::cli::run());
}
