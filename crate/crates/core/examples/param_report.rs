//! Parameter totals of the full-width networks and the combiners.
//!
//! cargo run --release --example param_report

use combonet::combonet::{CombinerKind, Combiner, ComboVariant};
use combonet::nn::{count_params, ParamStore};
use combonet::unet::{derive_config, UNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> combonet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut names = Vec::new();
    for (dims, in_plane) in [(2, 512), (2, 256), (3, 128)] {
        let mut store = ParamStore::<f32>::new();
        let config = derive_config(dims, in_plane, Some(20))?;
        UNet::new(&mut store, "net", config.clone(), true, &mut rng)?;
        let report = count_params(&store);
        println!("{:<6} total {:>10}  ({} layers)", config.name(), report.total, report.layers.len());
        names.push(report);
    }
    // the outer block pair of 2D512 is everything not shared with 2D256
    let extra: usize = names[0]
        .layers
        .iter()
        .filter(|l| !names[1].layers.contains(l))
        .map(|l| l.total())
        .sum();
    println!("2D512 - 2D256 = {} = outer block pair {extra}", names[0].total - names[1].total);
    for kind in [CombinerKind::TwoD, CombinerKind::ThreeD] {
        let mut store = ParamStore::<f32>::new();
        Combiner::new(&mut store, "combiner", ComboVariant::new(kind), &mut rng)?;
        println!("{kind}: {}", count_params(&store).total);
    }
    Ok(())
}
