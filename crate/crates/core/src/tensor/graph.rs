//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs have smaller indices, so the
//! tape is already in topological order and backward is one reverse sweep.

use super::conv::{conv_backward, conv_forward, ConvGeometry};
use super::kernels::{
    self, avg_pool_backward, batch_norm_apply, batch_norm_backward, channel_moments, max_pool_backward,
    upsample_backward, BnSaved, PoolGeometry,
};
use super::{Element, NdTensor};
use crate::error::{Error, Result};
use crate::training::loss;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: Vec<usize>,
    },
    Upsample {
        x: Var,
        factors: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        channels: Vec<usize>,
    },
    StackDepth {
        x: Var,
    },
    FlattenDepth {
        x: Var,
        depth: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    WeightedBce {
        p: Var,
        target: Vec<T>,
        beta: T,
    },
    Dice {
        p: Var,
        target: Vec<T>,
        smooth: T,
    },
}

struct Node<T> {
    value: Option<NdTensor<T>>,
    grad: Option<NdTensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    is_input: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    released: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            released: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: NdTensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.released {
            return Err(Error::GraphReleased);
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let is_input = matches!(op, Op::Leaf);
        // Untracked results keep no saved state; they behave as constants.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            grad: None,
            op,
            requires_grad,
            is_input,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert an input or parameter.
    pub fn leaf(&mut self, value: NdTensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: NdTensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&NdTensor<T>> {
        self.nodes
            .get(v.0)
            .and_then(|n| n.value.as_ref())
            .ok_or(Error::GraphReleased)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&NdTensor<T>> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<NdTensor<T>> {
        self.nodes.get_mut(v.0).and_then(|n| n.grad.take())
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeometry) -> Result<Var> {
        let y = conv_forward(self.value(x)?, self.value(w)?, b.map(|b| self.value(b)).transpose()?, geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        self.push(
            "conv",
            y,
            Op::Conv {
                x,
                w,
                b,
                geom: geom.clone(),
            },
            rg,
        )
    }

    pub fn max_pool(&mut self, x: Var, geom: &PoolGeometry) -> Result<Var> {
        let (y, argmax) = kernels::max_pool(self.value(x)?, geom)?;
        let rg = self.any_grad(&[x]);
        self.push("max_pool", y, Op::MaxPool { x, argmax }, rg)
    }

    pub fn avg_pool(&mut self, x: Var, window: &[usize]) -> Result<Var> {
        let y = kernels::avg_pool(self.value(x)?, window)?;
        let rg = self.any_grad(&[x]);
        self.push(
            "avg_pool",
            y,
            Op::AvgPool {
                x,
                window: window.to_vec(),
            },
            rg,
        )
    }

    pub fn upsample(&mut self, x: Var, factors: &[usize]) -> Result<Var> {
        let y = kernels::upsample_nearest(self.value(x)?, factors)?;
        let rg = self.any_grad(&[x]);
        self.push(
            "upsample",
            y,
            Op::Upsample {
                x,
                factors: factors.to_vec(),
            },
            rg,
        )
    }

    /// Batch normalization with batch statistics. Returns the output together
    /// with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = self.value(x)?;
        self.check_bn(xv.shape(), gamma, beta)?;
        let (mean, var) = channel_moments(xv);
        let (y, saved) = batch_norm_apply(
            xv,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            &mean,
            &var,
            eps,
            true,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = self.push(
            "batch_norm",
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            rg,
        )?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let xv = self.value(x)?;
        self.check_bn(xv.shape(), gamma, beta)?;
        if mean.len() != xv.shape()[1] || var.len() != xv.shape()[1] {
            return Err(Error::shape("batch_norm", "running statistics do not match channels"));
        }
        let (y, saved) = batch_norm_apply(
            xv,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            mean,
            var,
            eps,
            false,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            "batch_norm",
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            rg,
        )
    }

    fn check_bn(&self, shape: &[usize], gamma: Var, beta: Var) -> Result<()> {
        let c = *shape
            .get(1)
            .ok_or_else(|| Error::shape("batch_norm", "input has no channel axis"))?;
        if self.value(gamma)?.numel() != c || self.value(beta)?.numel() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("affine parameters do not match {c} channels"),
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x)?.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push("relu", y, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x)?.map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push("sigmoid", y, Op::Sigmoid { x }, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<NdTensor<T>> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        NdTensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", y, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("mul", y, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x)?.map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push("scale", y, Op::Scale { x, factor }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x)?.clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        self.push("reshape", y, Op::Reshape { x }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts.iter().map(|&p| self.value(p)).collect::<Result<Vec<_>>>()?;
        let channels = values.iter().map(|v| v.shape().get(1).copied().unwrap_or(0)).collect();
        let y = kernels::concat_channels(&values)?;
        let rg = self.any_grad(parts);
        self.push(
            "concat",
            y,
            Op::Concat {
                parts: parts.to_vec(),
                channels,
            },
            rg,
        )
    }

    /// `(N*D, C, H, W)` -> `(N, C, H, W, D)`.
    pub fn stack_depth(&mut self, x: Var, depth: usize) -> Result<Var> {
        let y = kernels::stack_depth(self.value(x)?, depth)?;
        let rg = self.any_grad(&[x]);
        self.push("stack_depth", y, Op::StackDepth { x }, rg)
    }

    /// `(N, C, H, W, D)` -> `(N*D, C, H, W)`.
    pub fn flatten_depth(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let depth = *xv.shape().last().unwrap_or(&1);
        let y = kernels::flatten_depth(xv)?;
        let rg = self.any_grad(&[x]);
        self.push("flatten_depth", y, Op::FlattenDepth { x, depth }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x)?.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        let rg = self.any_grad(&[x]);
        self.push("sum", NdTensor::scalar(T::of(s)), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        let s: f64 = v.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        let m = s / v.numel().max(1) as f64;
        let rg = self.any_grad(&[x]);
        self.push("mean", NdTensor::scalar(T::of(m)), Op::Mean { x }, rg)
    }

    /// Mean β-weighted binary cross entropy of probabilities `p` against a
    /// fixed binary target.
    pub fn weighted_bce(&mut self, p: Var, target: &NdTensor<T>, beta: T) -> Result<Var> {
        let pv = self.value(p)?;
        if pv.shape() != target.shape() {
            return Err(Error::shape(
                "weighted_bce",
                format!("prediction {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let value = loss::weighted_bce(pv.data(), target.data(), beta);
        let rg = self.any_grad(&[p]);
        self.push(
            "weighted_bce",
            NdTensor::scalar(value),
            Op::WeightedBce {
                p,
                target: target.data().to_vec(),
                beta,
            },
            rg,
        )
    }

    /// Smoothed dice overlap `(Σtp + s) / (Σt + Σp + s)`.
    pub fn dice_term(&mut self, p: Var, target: &NdTensor<T>, smooth: T) -> Result<Var> {
        let pv = self.value(p)?;
        if pv.shape() != target.shape() {
            return Err(Error::shape(
                "dice_term",
                format!("prediction {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let value = loss::dice_term(pv.data(), target.data(), smooth);
        let rg = self.any_grad(&[p]);
        self.push(
            "dice_term",
            NdTensor::scalar(value),
            Op::Dice {
                p,
                target: target.data().to_vec(),
                smooth,
            },
            rg,
        )
    }

    fn accumulate(&mut self, v: Var, delta: NdTensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    /// Propagate d(loss)/d(node) to every tracked leaf, then release all
    /// intermediate buffers. Leaf values and gradients survive.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.released {
            return Err(Error::GraphReleased);
        }
        let shape = self.value(loss)?.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(NdTensor::full(shape, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                self.nodes[i].value = None;
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, op, dy)?;
            self.nodes[i].value = None;
        }
        for node in self.nodes.iter_mut().filter(|n| !n.is_input) {
            node.value = None;
            node.grad = None;
        }
        self.released = true;
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: Op<T>, dy: NdTensor<T>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let want = (self.requires_grad(x), self.requires_grad(w), b.is_some_and(|b| self.requires_grad(b)));
                let grads = conv_backward(self.value(x)?, self.value(w)?, &geom, &dy, want)?;
                if let Some(dx) = grads.dx {
                    self.accumulate(x, dx);
                }
                if let Some(dw) = grads.dw {
                    self.accumulate(w, dw);
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    self.accumulate(b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = max_pool_backward(self.value(x)?.shape(), &argmax, &dy);
                self.accumulate(x, dx);
            }
            Op::AvgPool { x, window } => {
                let dx = avg_pool_backward(self.value(x)?.shape(), &window, &dy);
                self.accumulate(x, dx);
            }
            Op::Upsample { x, factors } => {
                let dx = upsample_backward(self.value(x)?.shape(), &factors, &dy);
                self.accumulate(x, dx);
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let shape = self.value(x)?.shape().to_vec();
                let (dx, dgamma, dbeta) = batch_norm_backward(&shape, self.value(gamma)?.data(), &saved, &dy);
                let c = dgamma.len();
                self.accumulate(x, dx);
                self.accumulate(gamma, NdTensor::new(vec![c], dgamma)?);
                self.accumulate(beta, NdTensor::new(vec![c], dbeta)?);
            }
            Op::Relu { x } => {
                let xv = self.value(x)?;
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                let dx = NdTensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(x, dx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.as_ref().ok_or(Error::GraphReleased)?;
                let data = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                let dx = NdTensor::new(y.shape().to_vec(), data)?;
                self.accumulate(x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(a)?, self.value(b)?);
                let da = NdTensor::new(
                    dy.shape().to_vec(),
                    dy.data().iter().zip(bv.data()).map(|(&g, &v)| g * v).collect(),
                )?;
                let db = NdTensor::new(
                    dy.shape().to_vec(),
                    dy.data().iter().zip(av.data()).map(|(&g, &v)| g * v).collect(),
                )?;
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale { x, factor } => {
                self.accumulate(x, dy.map(|g| g * factor));
            }
            Op::Reshape { x } => {
                let shape = self.value(x)?.shape().to_vec();
                self.accumulate(x, dy.reshape(shape)?);
            }
            Op::Concat { parts, channels } => {
                for (p, g) in parts.into_iter().zip(kernels::split_channels(&dy, &channels)) {
                    self.accumulate(p, g);
                }
            }
            Op::StackDepth { x } => {
                self.accumulate(x, kernels::flatten_depth(&dy)?);
            }
            Op::FlattenDepth { x, depth } => {
                self.accumulate(x, kernels::stack_depth(&dy, depth)?);
            }
            Op::Sum { x } => {
                let g = dy.item()?;
                let shape = self.value(x)?.shape().to_vec();
                self.accumulate(x, NdTensor::full(shape, g));
            }
            Op::Mean { x } => {
                let xv = self.value(x)?;
                let g = dy.item()? / T::of(xv.numel().max(1) as f64);
                let shape = xv.shape().to_vec();
                self.accumulate(x, NdTensor::full(shape, g));
            }
            Op::WeightedBce { p, target, beta } => {
                let g = dy.item()?;
                let pv = self.value(p)?;
                let grad = loss::weighted_bce_grad(pv.data(), &target, beta);
                let dp = NdTensor::new(pv.shape().to_vec(), grad.into_iter().map(|v| v * g).collect())?;
                self.accumulate(p, dp);
            }
            Op::Dice { p, target, smooth } => {
                let g = dy.item()?;
                let pv = self.value(p)?;
                let grad = loss::dice_term_grad(pv.data(), &target, smooth);
                let dp = NdTensor::new(pv.shape().to_vec(), grad.into_iter().map(|v| v * g).collect())?;
                self.accumulate(p, dp);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
