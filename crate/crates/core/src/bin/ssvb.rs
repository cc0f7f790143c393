fn main() {
    std::process::exit(ssvb::cli::run(std::env::args_os()));
}
