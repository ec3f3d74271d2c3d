fn main() {
    println!("lesionforge");
}
