fn main() { println!("rseg"); }
