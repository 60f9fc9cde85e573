fn main() {
    std::process::exit(shm_fomo::cli::run(std::env::args_os()));
}
