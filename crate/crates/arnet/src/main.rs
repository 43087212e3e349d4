fn main() {
    std::process::exit(arnet::cli::main_impl());
}
