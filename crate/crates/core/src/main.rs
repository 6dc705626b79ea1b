fn main() {
    std::process::exit(angular_distill::cli::run(std::env::args_os()));
}
