fn main() {
    std::process::exit(sdlab_cli::run(std::env::args_os()));
}
