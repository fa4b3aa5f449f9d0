//! The 2D network trained once per loss on the same fold.
//!
//! cargo run --release --example loss_ablation

use combonet::data::{generate_phantom, PhantomSpec};
use combonet::experiments::{run_loss_ablation, Case, PipelineConfig};
use combonet::training::loss::LossKind;

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
    pc.train.epochs_2d = 3;
    let table = run_loss_ablation(&cases, 4, 1, &LossKind::ALL, &pc)?;
    print!("{}", table.to_text());
    Ok(())
}
