fn main() {
    std::process::exit(tvstyle::cli::main());
}
