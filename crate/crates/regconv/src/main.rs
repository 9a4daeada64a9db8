fn main() {
    std::process::exit(regconv::cli::main_entry());
}
