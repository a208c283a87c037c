fn main() {
    std::process::exit(gdt_core::cli::cli_main(std::env::args_os()));
}
