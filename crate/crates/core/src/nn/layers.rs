use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Forward, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Element, NdTensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution with bias. Weights use He-normal initialization.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::InvalidArgument(format!("{name}: channel counts must be positive")));
        }
        let fan_in = c_in * geometry.taps();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(&geometry.kernel);
        let w = NdTensor::from_fn(shape, |_| T::of(normal.sample(rng)));
        let weight = store.add(name, ParamKind::Weight, w);
        let bias = store.add(name, ParamKind::Bias, NdTensor::zeros(vec![c_out]));
        Ok(Self {
            weight,
            bias,
            geometry,
            c_in,
            c_out,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight)?;
        let b = f.param(self.bias)?;
        f.graph.conv(x, w, Some(b), &self.geometry)
    }
}

/// Per-channel affine batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(name, ParamKind::Gamma, NdTensor::full(vec![channels], T::one())),
            beta: store.add(name, ParamKind::Beta, NdTensor::zeros(vec![channels])),
            running_mean: store.add(name, ParamKind::RunningMean, NdTensor::zeros(vec![channels])),
            running_var: store.add(name, ParamKind::RunningVar, NdTensor::full(vec![channels], T::one())),
            channels,
        }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma)?;
        let beta = f.param(self.beta)?;
        let eps = T::of(BN_EPS);
        if f.training(self.gamma) {
            let shape = f.value(x)?.shape().to_vec();
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let (y, mean, var) = f.graph.batch_norm_train(x, gamma, beta, eps)?;
            // Running variance tracks the unbiased estimate.
            let correction = if count > 1 {
                T::of(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let unbiased: Vec<T> = var.iter().map(|&v| v * correction).collect();
            let m = T::of(BN_MOMENTUM);
            f.update_running_stat(self.running_mean, &mean, m);
            f.update_running_stat(self.running_var, &unbiased, m);
            Ok(y)
        } else {
            let mean = f.running_stat(self.running_mean).to_vec();
            let var = f.running_stat(self.running_var).to_vec();
            f.graph.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
        }
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), c_in, c_out, geometry, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(f, x)?;
        let h = self.bn.forward(f, h)?;
        f.graph.relu(h)
    }
}

/// A run of shape-preserving 3-per-axis convolutions between two resolution
/// changes. The first layer maps `c_in -> c_out`, the rest `c_out -> c_out`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub dims: usize,
    pub layers: Vec<ConvBnRelu>,
}

impl ConvBlock {
    pub fn c_in(&self) -> usize {
        self.layers[0].conv.c_in
    }

    pub fn c_out(&self) -> usize {
        self.layers[self.layers.len() - 1].conv.c_out
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        Ok(x)
    }
}

pub fn build_conv_block<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    dims: usize,
    c_in: usize,
    c_out: usize,
    layers: usize,
    rng: &mut R,
) -> Result<ConvBlock> {
    if layers == 0 {
        return Err(Error::InvalidArgument(format!("{name}: a block needs at least one layer")));
    }
    if !(2..=3).contains(&dims) {
        return Err(Error::InvalidArgument(format!("{name}: dims must be 2 or 3")));
    }
    let layers = (0..layers)
        .map(|i| {
            let cin = if i == 0 { c_in } else { c_out };
            ConvBnRelu::new(store, &format!("{name}.{i}"), cin, c_out, ConvGeometry::same(dims, 3), rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvBlock { dims, layers })
}
