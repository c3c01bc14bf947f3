fn main() {
    std::process::exit(aseg::cli::main_entry());
}
