fn main() {
    // Placeholder until the cli module lands.
    eprintln!("gradekit: cli not wired yet");
    std::process::exit(4);
}
