fn main() {
    std::process::exit(subdim_cli::cli_main(std::env::args_os()));
}
