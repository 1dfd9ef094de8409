fn main() {
    std::process::exit(mdsnet::cli::run(std::env::args_os()));
}
