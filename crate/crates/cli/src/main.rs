use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = ivy_cli::args::Cli::parse();
    std::process::exit(ivy_cli::run(&cli));
}
