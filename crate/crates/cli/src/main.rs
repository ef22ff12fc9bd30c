fn main() {
    std::process::exit(posebench_cli::run(std::env::args_os()));
}
