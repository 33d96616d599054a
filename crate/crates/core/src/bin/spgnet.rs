fn main() {
    let code = spgnet::cli::dispatch(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
