fn main() {
    std::process::exit(ogs::cli::run(std::env::args_os()));
}
