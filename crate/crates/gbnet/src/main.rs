fn main() {
    std::process::exit(gbnet::cli::run());
}
