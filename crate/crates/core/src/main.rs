fn main() {
    std::process::exit(chi2tune::cli::main_with_args(std::env::args_os()));
}
