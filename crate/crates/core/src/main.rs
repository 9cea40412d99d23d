fn main() {
    let code = lkh_core::cli::main_with_args(std::env::args_os());
    std::process::exit(code);
}
