fn main() {
    std::process::exit(geoclr::cli::main_with_args(std::env::args_os()));
}
