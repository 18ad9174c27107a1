fn main() { std::process::exit(pavescan_service::cli::main()); }
