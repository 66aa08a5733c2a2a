fn main() {
    std::process::exit(zenith_cli::dispatch(std::env::args_os()));
}
