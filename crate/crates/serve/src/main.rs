fn main() {
    std::process::exit(iwnet_serve::cli::run(std::env::args_os()));
}
