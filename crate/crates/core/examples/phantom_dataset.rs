//! Generate a small phantom dataset and print one slice as text.
//!
//! cargo run --example phantom_dataset -- [out_dir]

use std::path::PathBuf;

use combonet::data::{generate_dataset, PhantomSpec};

fn main() -> combonet::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("phantoms"), PathBuf::from);
    std::fs::create_dir_all(&dir).map_err(|e| combonet::Error::InvalidArgument(e.to_string()))?;
    let spec = PhantomSpec {
        extents: [40, 64, 64],
        ..PhantomSpec::default()
    };
    let (path, manifest) = generate_dataset(&dir, &spec, 4)?;
    println!("wrote {}", path.display());
    let (image, mask) = manifest.volumes[0].load(&dir)?;
    println!("{} foreground voxels of {}", mask.count(), mask.data().len());
    // '#' tube, 'o' bright but unlabelled, '.' background
    for d in [5, 36] {
        println!("slice {d}:");
        for y in (0..64).step_by(2) {
            let row: String = (0..64)
                .map(|x| match (mask.get(d, y, x), image.get(d, y, x) > 0.5) {
                    (1, _) => '#',
                    (_, true) => 'o',
                    _ => '.',
                })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
