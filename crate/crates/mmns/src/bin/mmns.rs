fn main() {
    std::process::exit(mmns::cli::main());
}
