use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DERENDER_LOG", "warn")).init();
    let cli = derender::cli::Cli::parse();
    if let Err(e) = derender::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
