fn main() {
    std::process::exit(flcnn_cli::run(std::env::args_os()));
}
