fn main() {
    std::process::exit(bevloc_cli::run(std::env::args_os()));
}
