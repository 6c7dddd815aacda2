fn main() {
    std::process::exit(opm_core::cli::cli_main(std::env::args_os()));
}
