fn main() {
    std::process::exit(nmn_core::cli::dispatch(std::env::args_os()));
}
