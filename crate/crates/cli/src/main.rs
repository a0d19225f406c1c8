fn main() {
    std::process::exit(matchwage::run_cli(std::env::args_os()));
}
