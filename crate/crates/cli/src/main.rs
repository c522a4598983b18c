fn main() {
    std::process::exit(gradflow_cli::cli_main(std::env::args_os()));
}
