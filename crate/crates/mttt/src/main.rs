fn main() {
    std::process::exit(mttt::cli::run(std::env::args_os()));
}
