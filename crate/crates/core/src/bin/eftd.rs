fn main() {
    std::process::exit(eftd::cli::run_cli(std::env::args_os()));
}
