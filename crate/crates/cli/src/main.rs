fn main() {
    println!("germmft placeholder");
}
