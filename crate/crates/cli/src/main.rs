fn main() {
    std::process::exit(steinda_cli::run(std::env::args_os()));
}
