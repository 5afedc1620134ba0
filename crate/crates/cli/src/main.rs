fn main() -> std::process::ExitCode {
    connex_cli::cli::main()
}
