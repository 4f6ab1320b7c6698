fn main() {
    std::process::exit(autodeco_cli::run(std::env::args_os()));
}
