fn main() {
    std::process::exit(lfrain::cli::run_from_args(std::env::args()));
}
