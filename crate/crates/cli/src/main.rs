fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STRUCTSUM_LOG", "warn")).init();
    std::process::exit(structsum_cli::run(std::env::args_os()));
}
