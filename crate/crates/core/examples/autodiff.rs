//! Reverse-mode autodiff on a tiny convolution + sigmoid graph.
//!
//! cargo run --example autodiff

use combonet::tensor::{ConvGeometry, Graph, NdTensor};

fn main() -> combonet::Result<()> {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(NdTensor::from_fn(vec![1, 1, 3, 3], |i| i as f64 / 8.0), true)?;
    let w = g.leaf(NdTensor::full(vec![1, 1, 3, 3], 1.0), true)?;
    let y = g.conv(x, w, None, &ConvGeometry::same(2, 3))?;
    println!("conv of ramp with ones kernel: {:?}", g.value(y)?.data());
    let p = g.sigmoid(y)?;
    let loss = g.mean(p)?;
    println!("loss = {:.6}", g.value(loss)?.item()?);
    g.backward(loss)?;
    println!("d loss / d x = {:?}", g.grad(x).expect("tracked").data());
    println!("d loss / d w = {:?}", g.grad(w).expect("tracked").data());
    Ok(())
}
