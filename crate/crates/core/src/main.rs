fn main() {
    std::process::exit(did::run_cli(std::env::args_os()));
}
