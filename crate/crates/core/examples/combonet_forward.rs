//! One forward pass of an untrained desk-scale ComboNet through every stage
//! of the fusion: sub-network logits, upsampling, fusion and combiner.
//!
//! cargo run --release --example combonet_forward

use combonet::combonet::{CombinerKind, ComboNet, ComboNetConfig};
use combonet::data::{generate_phantom, PhantomSpec};
use combonet::nn::{count_params, Forward, Mode, ParamStore};
use combonet::training::samples::window_inputs;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> combonet::Result<()> {
    let (image, _) = generate_phantom(&PhantomSpec::default())?;
    let window = image.sub_volume(0, 20)?;
    let (full, low) = window_inputs(&window)?;
    println!("full-resolution slices {:?}, subsampled volume {:?}", full.shape(), low.shape());
    for kind in [CombinerKind::TwoD, CombinerKind::ThreeD] {
        let config = ComboNetConfig::for_extent(kind, 128, 20, 8, 16)?;
        let mut store = ParamStore::<f32>::new();
        let net = ComboNet::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let report = count_params(&store);
        let mut f = Forward::new(&mut store, Mode::Eval);
        let (a, b) = (f.input(full.clone())?, f.input(low.clone())?);
        let l2 = net.unet2d.logits(&mut f, a)?;
        let l3 = net.unet3d.logits(&mut f, b)?;
        let fused = net.combiner.fuse_inputs(&mut f, a, l2, l3)?;
        let p = net.combiner.forward(&mut f, a, l2, l3)?;
        let out = f.value(p)?;
        let (lo, hi) = out.data().iter().fold((1f32, 0f32), |(l, h), &v| (l.min(v), h.max(v)));
        println!(
            "{kind}: logits2d {:?} logits3d {:?} combiner input {:?} output {:?} in [{lo:.3}, {hi:.3}], {} params",
            f.value(l2)?.shape(),
            f.value(l3)?.shape(),
            f.value(fused)?.shape(),
            out.shape(),
            report.total
        );
    }
    Ok(())
}
