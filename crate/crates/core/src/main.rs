fn main() {
    std::process::exit(fsyncchan::cli::main());
}
