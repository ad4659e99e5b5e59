fn main() {
    println!("corrwave");
}
