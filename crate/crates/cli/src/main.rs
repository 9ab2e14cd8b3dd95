fn main() {
    std::process::exit(trdetr_cli::run(std::env::args_os()));
}
