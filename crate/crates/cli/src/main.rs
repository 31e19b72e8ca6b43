use clap::Parser;
use rdwgd_cli::{init_thread_pool, run, Cli};

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_thread_pool();
    let code = run(Cli::parse());
    std::process::ExitCode::from(code as u8)
}
