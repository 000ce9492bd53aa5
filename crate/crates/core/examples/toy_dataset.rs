//! Generate the synthetic segmentation scenes, write them in the on-disk
//! layout, and derive the class-balancing weights.
//!
//! cargo run --example toy_dataset -- /tmp/toy

use std::path::PathBuf;

use bfcn::dataset::{write_ppm, Dataset, SceneConfig};
use bfcn::trainer::class_weights;

fn main() -> bfcn::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("bfcn-toy"), PathBuf::from);
    let data = Dataset::generate(1, 32, 8, &SceneConfig::new(64, 64, 5))?;
    data.save(&dir)?;
    write_ppm(&dir.join("preview.ppm"), &data.train[0].image)?;

    let freqs = data.class_frequencies();
    let weights = class_weights(&freqs, 1.4)?;
    println!("class  pixel share  weight");
    for (c, (p, w)) in freqs.iter().zip(&weights).enumerate() {
        println!("{c:>5}  {p:>11.3}  {w:>6.3}");
    }

    let back = Dataset::load(&dir)?;
    assert_eq!(back.train.len(), 32);
    println!("wrote {} (reload ok)", dir.display());
    Ok(())
}
