fn main() {
    std::process::exit(drm_lab::main_with(std::env::args_os()));
}
