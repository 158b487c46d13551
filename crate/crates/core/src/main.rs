fn main() {
    std::process::exit(coselect::cli::run_command(std::env::args_os().skip(1)));
}
