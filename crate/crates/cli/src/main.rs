fn main() {
    std::process::exit(pathbench::run(std::env::args_os()));
}
