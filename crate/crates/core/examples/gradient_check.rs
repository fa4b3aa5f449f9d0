//! Central finite differences against autodiff for a ConvBnRelu layer.
//!
//! cargo run --example gradient_check

use combonet::nn::{ConvBnRelu, Forward, Mode, ParamStore};
use combonet::tensor::{ConvGeometry, NdTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn loss(store: &mut ParamStore<f64>, layer: &ConvBnRelu, x: &NdTensor<f64>) -> combonet::Result<(f64, Vec<f64>)> {
    let mut f = Forward::new(store, Mode::Train);
    let xv = f.input(x.clone())?;
    let y = layer.forward(&mut f, xv)?;
    let s = f.graph.sigmoid(y)?;
    let l = f.graph.mean(s)?;
    let value = f.value(l)?.item()?;
    let grads = f.backward(l)?;
    let w = grads
        .into_iter()
        .find(|(id, _)| *id == layer.conv.weight)
        .expect("weight gradient")
        .1
        .into_data();
    Ok((value, w))
}

fn main() -> combonet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let layer = ConvBnRelu::new(&mut store, "l", 2, 3, ConvGeometry::same(2, 3), &mut rng)?;
    let x = NdTensor::from_fn(vec![2, 2, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let (_, analytic) = loss(&mut store.clone(), &layer, &x)?;
    let wid = layer.conv.weight;
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.value_mut(wid).data_mut()[i] += delta;
            loss(&mut s, &layer, &x).map(|(v, _)| v)
        };
        let numeric = (eval(EPS)? - eval(-EPS)?) / (2.0 * EPS);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    println!("{} weights checked, max relative error {worst:.2e}", analytic.len());
    Ok(())
}
