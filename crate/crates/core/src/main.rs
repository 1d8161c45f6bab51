fn main() {
    std::process::exit(monkey_core::cli::run(std::env::args_os()));
}
