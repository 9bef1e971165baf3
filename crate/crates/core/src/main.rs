use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = speechmt::cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match speechmt::cli::run(cli, &mut stdout) {
        Ok(outcome) => std::process::exit(outcome.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
