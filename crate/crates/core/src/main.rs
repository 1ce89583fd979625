fn main() {
    std::process::exit(ptycho::cli::run(std::env::args_os()));
}
