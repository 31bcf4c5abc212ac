fn main() {
    std::process::exit(vidpoint::cli::main_with_args(std::env::args_os()));
}
