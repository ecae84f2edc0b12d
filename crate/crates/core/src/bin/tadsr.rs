fn main() {
    std::process::exit(tadsr_core::cli::run());
}
