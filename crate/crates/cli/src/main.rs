fn main() {
    std::process::exit(ddgauss_cli::main_with_args(std::env::args().skip(1)));
}
