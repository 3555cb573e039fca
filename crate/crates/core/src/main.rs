fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GFLOWSEQ_LOG", "info")).init();
    std::process::exit(gflowseq::cli::main_with_args(std::env::args_os()));
}
