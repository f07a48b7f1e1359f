fn main() {
    std::process::exit(rest_core::cli::main());
}
