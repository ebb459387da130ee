fn main() {
    std::process::exit(weiper::cli::dispatch(std::env::args_os()));
}
