fn main() {
    std::process::exit(fbsde_control::cli::run());
}
