fn main() {
    std::process::exit(tickertalk::commands::execute(std::env::args_os()));
}
