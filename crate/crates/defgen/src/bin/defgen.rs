fn main() {
    defgen::cli::init_logging();
    std::process::exit(defgen::cli::main_with_args(std::env::args_os()));
}
