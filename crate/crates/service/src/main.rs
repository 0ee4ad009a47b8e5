fn main() {
    std::process::exit(ctagent::cli::run(std::env::args_os()));
}
