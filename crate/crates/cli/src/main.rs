fn main() {
    std::process::exit(mstop_cli::run(std::env::args_os()));
}
