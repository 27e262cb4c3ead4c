fn main() {
    let code = nerveseg_cli::run_cli(std::env::args_os().skip(1), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
