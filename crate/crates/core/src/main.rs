fn main() {
    println!("comicgan");
}
