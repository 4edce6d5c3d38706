fn main() {
    if std::env::var("JOINTSEG_DETERMINISTIC").is_ok_and(|v| v == "1") {
        // must happen before any thread pool exists
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(jointseg::cli::run_from(std::env::args_os()));
}
