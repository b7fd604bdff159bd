fn main() {
    std::process::exit(chromatrack::cli::run(std::env::args_os()));
}
