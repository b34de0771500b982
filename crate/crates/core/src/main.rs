fn main() -> std::process::ExitCode {
    kpdepth::cli::main_exit()
}
