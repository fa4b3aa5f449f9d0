//! Chunk plans, and chunked inference matching whole-volume inference.
//!
//! cargo run --release --example tiled_inference

use combonet::checkpoint::{Checkpoint, ModelArch};
use combonet::combonet::{CombinerKind, ComboNet, ComboNetConfig};
use combonet::data::{generate_phantom, PhantomSpec};
use combonet::inference::{infer_probabilities, plan_chunks};
use combonet::model::LoadedModel;
use combonet::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> combonet::Result<()> {
    for depth in [240, 250] {
        let plan = plan_chunks(depth, 120, 20)?;
        let spans: Vec<String> = plan
            .chunks
            .iter()
            .map(|c| format!("{}+{} (padded {})", c.start, c.real, c.padded))
            .collect();
        println!("D={depth}: {}", spans.join(", "));
    }
    let (image, _) = generate_phantom(&PhantomSpec {
        extents: [80, 64, 64],
        ..PhantomSpec::default()
    })?;
    let config = ComboNetConfig::for_extent(CombinerKind::TwoD, 64, 20, 8, 16)?;
    let mut store = ParamStore::<f32>::new();
    ComboNet::new(&mut store, config.clone(), &mut ChaCha8Rng::seed_from_u64(1))?;
    let ck = Checkpoint::new(ModelArch::Combonet { config }, "init", vec![], store);
    let mut model = LoadedModel::from_checkpoint(&ck)?;
    let whole = infer_probabilities(&mut model, &image, &plan_chunks(80, 80, 20)?, 1)?;
    let chunked = infer_probabilities(&mut model, &image, &plan_chunks(80, 40, 20)?, 1)?;
    println!("whole vs 40-slice chunks bitwise equal: {}", whole.data() == chunked.data());
    let odd = image.sub_volume(0, 70)?;
    let p = infer_probabilities(&mut model, &odd, &plan_chunks(70, 40, 20)?, 1)?;
    println!("70 slices in chunks of 40 -> extents {:?}", p.extents());
    Ok(())
}
