//! Writes the synthetic landmark streams used by the CLI smoke dataset.
//!
//! ```text
//! cargo run -p gesture-core --example smoke_streams -- crates/cli/tests/fixtures/smoke/streams
//! ```

use std::path::PathBuf;

use gesture_core::synth::raise_stream;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "streams".into()));
    std::fs::create_dir_all(&dir)?;
    // hand raised from 1.0 s to 2.2 s, resting low otherwise
    let home = raise_stream(30.0, 3.0, &[(1.0, 2.2)], 0.8, 0.4);
    std::fs::write(dir.join("home_light.json"), home.to_json())?;
    let video = raise_stream(30.0, 3.0, &[(0.6, 1.6)], 0.75, 0.35);
    std::fs::write(dir.join("video_next.json"), video.to_json())?;
    let idle = raise_stream(30.0, 2.0, &[], 0.8, 0.4);
    std::fs::write(dir.join("idle.json"), idle.to_json())?;
    println!("wrote streams to {}", dir.display());
    Ok(())
}
