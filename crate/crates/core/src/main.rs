fn main() {
    std::process::exit(decision_core::cli::main());
}
