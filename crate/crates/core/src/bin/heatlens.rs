fn main() {
    std::process::exit(heatlens::cli::main_with_args(std::env::args_os()));
}
