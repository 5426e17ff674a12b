fn main() {
    std::process::exit(tac_npml::cli::run(std::env::args_os()));
}
