fn main() {
    std::process::exit(minipromptseg::cli::run(std::env::args_os()));
}
