fn main() {
    std::process::exit(soundclr::cli::run(std::env::args_os()));
}
