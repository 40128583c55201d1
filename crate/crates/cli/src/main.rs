fn main() {
    std::process::exit(vinet_cli::run(std::env::args_os()));
}
