fn main() -> std::process::ExitCode {
    moe_forge::cli::main()
}
