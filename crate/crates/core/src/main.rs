fn main() -> std::process::ExitCode {
    remotenet::cli::main()
}
