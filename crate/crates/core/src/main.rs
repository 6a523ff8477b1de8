fn main() {
    std::process::exit(cinema_core::cli::dispatch(std::env::args_os()));
}
