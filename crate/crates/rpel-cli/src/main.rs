fn main() {
    eprintln!("rpel: not yet implemented");
    std::process::exit(1);
}
