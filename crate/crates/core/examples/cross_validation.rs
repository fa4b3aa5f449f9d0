//! A small k-fold run over eight phantoms with short training budgets.
//!
//! cargo run --release --example cross_validation

use combonet::data::{generate_phantom, PhantomSpec};
use combonet::experiments::{run_cross_validation, Case, PipelineConfig};

fn main() -> combonet::Result<()> {
    let cases = (0..8)
        .map(|seed| {
            let (image, mask) = generate_phantom(&PhantomSpec {
                seed,
                extents: [20, 64, 64],
                ..PhantomSpec::default()
            })?;
            Ok(Case {
                id: format!("phantom-{seed:03}"),
                image,
                mask,
            })
        })
        .collect::<combonet::Result<Vec<_>>>()?;
    let mut pc = PipelineConfig {
        in_plane: 64,
        ..PipelineConfig::default()
    };
    pc.train.epochs_2d = 2;
    pc.train.epochs_3d = 2;
    pc.train.epochs_combiner = 2;
    let table = run_cross_validation(&cases, 4, &pc)?;
    print!("{}", table.to_text());
    println!("{}", serde_json::to_string(&table.mean)?);
    Ok(())
}
