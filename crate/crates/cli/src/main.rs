fn main() {
    std::process::exit(fieldlab_cli::run(std::env::args_os()));
}
