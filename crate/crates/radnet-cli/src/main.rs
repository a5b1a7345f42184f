fn main() {
    eprintln!("error: not yet wired up");
    std::process::exit(2);
}
