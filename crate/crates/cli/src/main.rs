fn main() {
    std::process::exit(stepprune_cli::run(std::env::args_os()));
}
