fn main() {
    std::process::exit(sdseg::cli::main_with_args(std::env::args_os()));
}
