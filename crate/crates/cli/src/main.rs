fn main() {
    println!("bandvq");
}
