fn main() -> std::process::ExitCode {
    charfunnel::cli::main()
}
