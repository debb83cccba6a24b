fn main() {
    std::process::exit(projcomp::cli::run(std::env::args_os()));
}
