fn main() {
    std::process::exit(ipsb::cli::run(std::env::args_os()));
}
