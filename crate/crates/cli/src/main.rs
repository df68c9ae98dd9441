fn main() {
    std::process::exit(csvmasr::app::run(std::env::args_os()));
}
