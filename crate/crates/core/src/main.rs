fn main() {
    std::process::exit(absorb_eq::cli::run_main());
}
