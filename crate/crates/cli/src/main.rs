fn main() {
    std::process::exit(idsc_cli::run(std::env::args_os()));
}
