fn main() {
    std::process::exit(matern_eb::cli::run(std::env::args_os()));
}
