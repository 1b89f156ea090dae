fn main() {
    std::process::exit(toothrec_cli::run(std::env::args_os()));
}
