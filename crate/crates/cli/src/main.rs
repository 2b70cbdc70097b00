fn main() {
    std::process::exit(cdn_cli::run(std::env::args_os()));
}
