fn main() {
    std::process::exit(gcfs::cli::dispatch(std::env::args_os()));
}
