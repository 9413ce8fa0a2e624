fn main() {
    println!("castnet: pipeline stages not wired yet");
}
