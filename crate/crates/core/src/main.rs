fn main() {
    let code = filmiqa::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
