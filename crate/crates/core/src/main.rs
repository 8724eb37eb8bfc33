fn main() -> std::process::ExitCode {
    psa_mil::cli::main()
}
