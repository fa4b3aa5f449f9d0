//! Save a UNet checkpoint, reload it and compare predictions.
//!
//! cargo run --release --example checkpoint_roundtrip

use combonet::checkpoint::{Checkpoint, ModelArch};
use combonet::nn::ParamStore;
use combonet::tensor::NdTensor;
use combonet::unet::{derive_scaled_config, UNet};
use combonet::model::LoadedModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> combonet::Result<()> {
    let config = derive_scaled_config(2, 64, None, 8)?;
    let mut store = ParamStore::<f32>::new();
    UNet::new(&mut store, "unet2d", config.clone(), true, &mut ChaCha8Rng::seed_from_u64(3))?;
    let arch = ModelArch::Unet {
        prefix: "unet2d".into(),
        config,
        with_sigmoid: true,
    };
    let ck = Checkpoint::new(arch, "example", vec![], store);
    let path = std::env::temp_dir().join("combonet-example-unet.json");
    ck.save(&path)?;
    let back = Checkpoint::<f32>::load(&path)?;
    println!("{} tensors reloaded from {}", back.store.len(), path.display());
    let x = NdTensor::from_fn(vec![2, 1, 64, 64], |i| ((i % 97) as f32) / 97.0);
    let low = NdTensor::zeros(vec![1, 1, 16, 16, 2]);
    let a = LoadedModel::from_checkpoint(&ck)?.predict_window(&x, &low)?;
    let b = LoadedModel::from_checkpoint(&back)?.predict_window(&x, &low)?;
    println!("predictions identical after reload: {}", a.data() == b.data());
    Ok(())
}
