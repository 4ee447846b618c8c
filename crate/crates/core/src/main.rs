fn main() {
    std::process::exit(snr90::cli::run(std::env::args_os()));
}
