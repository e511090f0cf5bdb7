fn main() {
    std::process::exit(changeflow::run_cli());
}
