fn main() -> std::process::ExitCode {
    qartsr::cli::main_entry()
}
