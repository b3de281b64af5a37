fn main() {
    std::process::exit(kvprompt_cli::main_with_args(std::env::args_os()));
}
