fn main() {
    std::process::exit(onoff::cli::main());
}
