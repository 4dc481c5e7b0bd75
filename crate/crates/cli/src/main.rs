fn main() {
    std::process::exit(dentoforge_cli::run(std::env::args_os()));
}
