fn main() {
    std::process::exit(trackmdp::cli::main_with_args(std::env::args_os()));
}
