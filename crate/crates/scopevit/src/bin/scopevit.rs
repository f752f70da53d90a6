fn main() {
    std::process::exit(scopevit::cli::main_with_args(std::env::args_os()));
}
