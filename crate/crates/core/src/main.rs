fn main() {
    std::process::exit(kags::cli::run(std::env::args_os()));
}
