fn main() {
    std::process::exit(odflow::cli::run(std::env::args_os()));
}
