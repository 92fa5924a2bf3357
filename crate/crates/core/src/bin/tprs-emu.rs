fn main() {
    std::process::exit(tprs_emu::cli::main_with_args(std::env::args_os()));
}
