fn main() {
    std::process::exit(retro_desk::cli::main());
}
