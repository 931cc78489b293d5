fn main() {
    std::process::exit(kgic::cli::run(std::env::args_os()));
}
