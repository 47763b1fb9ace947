fn main() {
    std::process::exit(cslid::main_with_args(std::env::args_os()));
}
