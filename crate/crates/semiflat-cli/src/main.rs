fn main() {
    eprintln!("semiflat: command-line interface under construction");
    std::process::exit(2);
}
