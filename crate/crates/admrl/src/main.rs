fn main() {
    std::process::exit(admrl::cli::cli_main(std::env::args()));
}
