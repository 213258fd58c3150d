fn main() {
    std::process::exit(medusa::cli::main_with_std());
}
