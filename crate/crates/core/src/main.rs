fn main() {
    std::process::exit(d2s::cli::run(std::env::args_os()));
}
