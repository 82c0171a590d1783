fn main() {
    std::process::exit(capres::cli::run(std::env::args_os()));
}
