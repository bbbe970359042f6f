fn main() {
    std::process::exit(dpanet_cli::run(std::env::args_os().collect()));
}
