fn main() {
    println!("ddlab");
}
