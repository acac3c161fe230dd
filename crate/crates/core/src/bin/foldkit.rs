fn main() -> std::process::ExitCode {
    foldkit::cli::main()
}
