fn main() {
    let mut logger =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        logger.write_style(env_logger::WriteStyle::Never);
    }
    logger.target(env_logger::Target::Stderr).init();
    std::process::exit(fuselite::cli::run(std::env::args_os()));
}
