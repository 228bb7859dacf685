fn main() {
    std::process::exit(s2tpv::cli::run(std::env::args_os()));
}
