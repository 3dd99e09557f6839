fn main() {
    std::process::exit(ssgp::cli::run(std::env::args_os()));
}
