fn main() {
    std::process::exit(covidnet_cli::run(std::env::args_os()));
}
