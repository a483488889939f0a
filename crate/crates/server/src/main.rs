fn main() {
    std::process::exit(planfirst_server::cli::main());
}
