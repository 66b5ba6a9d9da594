fn main() {
    rep_holonomy::cli::init_logging();
    std::process::exit(rep_holonomy::cli::run(std::env::args_os()));
}
