fn main() {
    std::process::exit(promptseg::runner::cli_main());
}
