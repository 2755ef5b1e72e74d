fn main() {
    std::process::exit(condgan::cli::run(std::env::args_os()));
}
