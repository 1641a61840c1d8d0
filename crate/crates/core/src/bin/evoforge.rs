fn main() {
    std::process::exit(evoforge::cli::run_cli(std::env::args_os()));
}
