fn main() {
    std::process::exit(geoagg_cli::run(std::env::args_os()));
}
