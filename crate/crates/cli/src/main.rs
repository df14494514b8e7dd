use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PREFROBUST_LOG", "warn")).init();
    let cli = prefrobust_cli::Cli::parse();
    if let Err(e) = prefrobust_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(prefrobust_cli::exit_code(&e));
    }
}
