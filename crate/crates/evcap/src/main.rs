fn main() {
    let code = evcap::cli::run(std::env::args(), std::env::vars());
    std::process::exit(code);
}
