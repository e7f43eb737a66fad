fn main() {
    std::process::exit(pinn_pid::harness::cli::main_with(std::env::args_os()));
}
