fn main() {
    std::process::exit(carbon_faas_cli::run_cli(std::env::args_os()));
}
