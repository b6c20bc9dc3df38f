fn main() {
    std::process::exit(bifurcated_attn::bench::cli::main_with_args(
        std::env::args_os(),
    ));
}
