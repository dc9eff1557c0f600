fn main() {
    std::process::exit(mcseg::cli::run(std::env::args_os()));
}
