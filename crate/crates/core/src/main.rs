fn main() {
    std::process::exit(ibdg_flow::cli::cli_main(std::env::args_os()));
}
