fn main() {
    std::process::exit(plan_cli::run_cli(std::env::args_os()));
}
