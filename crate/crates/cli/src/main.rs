fn main() {
    std::process::exit(carafe_cli::run(std::env::args_os()));
}
