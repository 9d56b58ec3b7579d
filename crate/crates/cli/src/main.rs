fn main() {
    std::process::exit(tlt_cli::run(std::env::args()));
}
