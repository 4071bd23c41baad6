fn main() {
    std::process::exit(flexdepth::cli::dispatch(std::env::args_os()));
}
