fn main() {
    std::process::exit(simpletron_cli::run_cli(std::env::args_os()));
}
