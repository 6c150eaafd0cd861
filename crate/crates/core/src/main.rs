fn main() {
    std::process::exit(naed::cli::run(std::env::args_os()));
}
