fn main() {
    std::process::exit(patchcure::cli::run(std::env::args_os()));
}
