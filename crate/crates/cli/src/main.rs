fn main() {
    let seed = std::env::var(ecofuse_cli::SEED_ENV).ok();
    let code = ecofuse_cli::run(
        std::env::args_os(),
        seed.as_deref(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
