use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(attn_pca::cli::main_with(attn_pca::cli::Cli::parse()));
}
