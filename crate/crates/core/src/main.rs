fn main() {
    std::process::exit(em2mlr::harness::cli::run(std::env::args_os()));
}
