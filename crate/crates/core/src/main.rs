fn main() {
    std::process::exit(arc_core::cli::main_with_args(std::env::args_os()));
}
