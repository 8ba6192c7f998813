fn main() -> std::process::ExitCode {
    hloc::cli::main()
}
