fn main() {
    let code = cyclecorr_cli::cli::main_with(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
