fn main() { std::process::exit(aart::cli::main()); }
