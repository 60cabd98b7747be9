fn main() {
    std::process::exit(poselift::cli::run(std::env::args_os()));
}
