fn main() {
    std::process::exit(nestedformer::cli::run(std::env::args_os()));
}
