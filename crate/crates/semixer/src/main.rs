fn main() {
    std::process::exit(semixer::cli::run());
}
