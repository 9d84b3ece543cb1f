fn main() {
    std::process::exit(rsfnet::cli::run(std::env::args_os()));
}
