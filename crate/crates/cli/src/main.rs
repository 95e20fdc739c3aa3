fn main() {
    std::process::exit(ems_cli::run(std::env::args_os()));
}
