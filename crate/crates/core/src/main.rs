fn main() {
    std::process::exit(poisson_tori::cli::run(std::env::args_os()));
}
