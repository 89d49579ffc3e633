fn main() {
    std::process::exit(secpm::cli::run_cli(std::env::args_os()));
}
