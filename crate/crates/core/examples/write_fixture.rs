//! Regenerates the bundled six-patient fixture:
//! `cargo run -p vdes-core --example write_fixture -- <dir>`

use std::path::PathBuf;

use vdes_core::synth::{write_cesm_fixture, FixtureSpec};

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixture"));
    let views = write_cesm_fixture(&dir, &FixtureSpec::default())?;
    for v in &views {
        println!("P{} {:?} {:?} shift {:?} lesion {:?}", v.patient_id, v.side, v.view, v.shift, v.lesion);
    }
    Ok(())
}
