fn main() {
    std::process::exit(gender_tuning::cli::run_cli());
}
