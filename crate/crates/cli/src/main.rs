fn main() {
    std::process::exit(cbm_align_cli::run(std::env::args_os()));
}
