fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(affect_diff::cli::run(&args));
}
