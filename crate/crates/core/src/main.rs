fn main() {
    std::process::exit(dereflect::cli::run());
}
