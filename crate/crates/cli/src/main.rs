fn main() {
    std::process::exit(discon_cli::dispatch(std::env::args_os()));
}
