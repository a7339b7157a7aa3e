fn main() {
    let mut out = std::io::stdout().lock();
    let code = qoverlay::cli::run(std::env::args_os(), &mut out);
    drop(out);
    std::process::exit(code);
}
