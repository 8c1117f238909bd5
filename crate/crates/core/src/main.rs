fn main() {
    std::process::exit(drasmil::cli::run(std::env::args_os()));
}
