fn main() { println!("ahlab"); }
