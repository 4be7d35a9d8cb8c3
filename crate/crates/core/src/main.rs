fn main() {
    std::process::exit(mfoml::cli::run_from(std::env::args_os()));
}
