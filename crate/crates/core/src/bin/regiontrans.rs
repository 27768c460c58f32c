fn main() -> std::process::ExitCode {
    regiontrans::cli::main_with_args()
}
