fn main() {
    std::process::exit(disclab_cli::cli_dispatch(std::env::args_os()));
}
