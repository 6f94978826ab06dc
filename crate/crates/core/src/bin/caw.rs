fn main() {
    let level = std::env::var("CAW_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    std::process::exit(caw_core::cli::main_with_args(std::env::args_os()));
}
