fn main() {
    std::process::exit(slt_lab::cli::main_with_args(std::env::args_os()));
}
