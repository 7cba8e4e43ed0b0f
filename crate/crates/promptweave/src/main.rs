fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(promptweave::cli::run_cli(&argv));
}
