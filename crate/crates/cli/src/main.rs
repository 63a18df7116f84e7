fn main() {
    std::process::exit(mbr_cli::main_with_args(std::env::args_os()));
}
