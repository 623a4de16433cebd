fn main() {
    std::process::exit(ccfa_lab::cli::run_cli(std::env::args_os()));
}
