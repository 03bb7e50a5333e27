fn main() -> std::process::ExitCode {
    tboa_cli::app::main()
}
