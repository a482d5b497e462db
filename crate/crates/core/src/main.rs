fn main() {
    std::process::exit(deskmt::cli::run());
}
