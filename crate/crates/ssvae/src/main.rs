fn main() {
    std::process::exit(ssvae::run(std::env::args_os()));
}
