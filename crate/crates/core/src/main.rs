fn main() {
    std::process::exit(lattice_sde::cli::run(std::env::args_os()));
}
