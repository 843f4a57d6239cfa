fn main() {
    std::process::exit(cfs_curate::cli::run(std::env::args_os()));
}
