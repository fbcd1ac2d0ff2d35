fn main() {
    std::process::exit(knnplus_cli::run(std::env::args()));
}
