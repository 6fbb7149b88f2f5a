fn main() {
    eprintln!("kdmvs: not wired up yet");
}
