use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(fracsch_cli::main_with(fracsch_cli::Cli::parse()));
}
