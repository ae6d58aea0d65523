fn main() {
    hyperred::cli::main_entry()
}
