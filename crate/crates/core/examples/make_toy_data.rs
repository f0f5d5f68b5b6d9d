//! Regenerates the bundled toy dataset under `data/toy`.

use std::path::PathBuf;

fn main() -> stylestego::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/toy"));
    stylestego::data::write_toy_dataset(&dir, 12, 6, 96)?;
    println!("wrote toy dataset to {}", dir.display());
    Ok(())
}
