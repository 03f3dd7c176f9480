fn main() {
    std::process::exit(bpre_cli::run(std::env::args_os()));
}
