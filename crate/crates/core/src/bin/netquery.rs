fn main() {
    // placeholder while the library comes up; replaced by the real CLI
    eprintln!("netquery: not yet wired");
    std::process::exit(4);
}
