fn main() {
    std::process::exit(qfl_cli::run(std::env::args_os()));
}
