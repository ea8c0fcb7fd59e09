fn main() {
    std::process::exit(dual_mpc::harness::cli_main(std::env::args_os()));
}
