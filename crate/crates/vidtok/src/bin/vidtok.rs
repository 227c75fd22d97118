fn main() {
    std::process::exit(vidtok::cli::run(std::env::args_os()));
}
