fn main() {
    std::process::exit(bkrnet_cli::run(std::env::args_os()));
}
