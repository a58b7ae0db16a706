fn main() {
    std::process::exit(ecnet::cli::run(std::env::args_os()));
}
