use serde::{Deserialize, Serialize};

use super::{Element, NdTensor};
use crate::error::{Error, Result};

/// Kernel, stride and zero-padding per spatial axis. Two-dimensional
/// geometries act on `(N, C, H, W)`, three-dimensional on `(N, C, H, W, D)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvGeometry {
    /// Stride one with `(k - 1) / 2` padding; preserves extents for odd `k`.
    pub fn same(dims: usize, k: usize) -> Self {
        Self {
            kernel: vec![k; dims],
            stride: vec![1; dims],
            padding: vec![(k - 1) / 2; dims],
        }
    }

    pub fn new(kernel: Vec<usize>, stride: Vec<usize>, padding: Vec<usize>) -> Result<Self> {
        let dims = kernel.len();
        if !(2..=3).contains(&dims) || stride.len() != dims || padding.len() != dims {
            return Err(Error::InvalidArgument(
                "convolution geometry needs 2 or 3 matching axes".into(),
            ));
        }
        if kernel.iter().chain(&stride).any(|&v| v == 0) {
            return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    pub fn dims(&self) -> usize {
        self.kernel.len()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_spatial(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.dims() {
            return Err(Error::shape(
                "conv",
                format!("{}-d geometry applied to spatial extents {:?}", self.dims(), input),
            ));
        }
        input
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let span = n + 2 * self.padding[a];
                if span < self.kernel[a] {
                    return Err(Error::shape(
                        "conv",
                        format!("non-positive output extent on axis {a} (input {n})"),
                    ));
                }
                Ok((span - self.kernel[a]) / self.stride[a] + 1)
            })
            .collect()
    }
}

fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[..v.len()].copy_from_slice(v);
    out
}

/// Resolved extents for one convolution call.
struct Plan {
    n: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Plan {
    fn new(x: &[usize], w: &[usize], geom: &ConvGeometry) -> Result<Self> {
        let dims = geom.dims();
        if x.len() != dims + 2 || w.len() != dims + 2 {
            return Err(Error::shape(
                "conv",
                format!("input {:?} / weight {:?} do not match a {dims}-d convolution", x, w),
            ));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv",
                format!("input has {} channels, weight expects {}", x[1], w[1]),
            ));
        }
        if w[2..] != geom.kernel[..] {
            return Err(Error::shape(
                "conv",
                format!("weight kernel {:?} differs from geometry {:?}", &w[2..], geom.kernel),
            ));
        }
        let out = geom.output_spatial(&x[2..])?;
        Ok(Self {
            n: x[0],
            c_in: x[1],
            c_out: w[0],
            input: pad3(&x[2..], 1),
            output: pad3(&out, 1),
            kernel: pad3(&geom.kernel, 1),
            stride: pad3(&geom.stride, 1),
            pad: pad3(&geom.padding, 0),
        })
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1 && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Input coordinate for output index `o` and tap `k` on axis `a`, or None
    /// when it falls into the zero padding.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[a] + k) as isize - self.pad[a] as isize;
        (pos >= 0 && (pos as usize) < self.input[a]).then_some(pos as usize)
    }

    /// Gather one batch item into a `(c_in * taps, out_plane)` column matrix.
    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let [oh, ow, od] = self.output;
        let [ih, iw, id] = self.input;
        let [kh, kw, kd] = self.kernel;
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.c_in {
            let xc = &x[c * ih * iw * id..(c + 1) * ih * iw * id];
            for a in 0..kh {
                for b in 0..kw {
                    for e in 0..kd {
                        let dst = &mut col[row * plane..(row + 1) * plane];
                        let mut i = 0;
                        for y in 0..oh {
                            let sy = self.source(0, y, a);
                            for xx in 0..ow {
                                let sx = self.source(1, xx, b);
                                match (sy, sx) {
                                    (Some(sy), Some(sx)) => {
                                        let base = (sy * iw + sx) * id;
                                        for z in 0..od {
                                            dst[i] = match self.source(2, z, e) {
                                                Some(sz) => xc[base + sz],
                                                None => T::zero(),
                                            };
                                            i += 1;
                                        }
                                    }
                                    _ => {
                                        dst[i..i + od].fill(T::zero());
                                        i += od;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-add a column matrix back onto one batch item.
    fn col2im<T: Element>(&self, col: &[T], dx: &mut [T]) {
        let [oh, ow, od] = self.output;
        let [ih, iw, id] = self.input;
        let [kh, kw, kd] = self.kernel;
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.c_in {
            let dxc = &mut dx[c * ih * iw * id..(c + 1) * ih * iw * id];
            for a in 0..kh {
                for b in 0..kw {
                    for e in 0..kd {
                        let src = &col[row * plane..(row + 1) * plane];
                        let mut i = 0;
                        for y in 0..oh {
                            let sy = self.source(0, y, a);
                            for xx in 0..ow {
                                let sx = self.source(1, xx, b);
                                if let (Some(sy), Some(sx)) = (sy, sx) {
                                    let base = (sy * iw + sx) * id;
                                    for z in 0..od {
                                        if let Some(sz) = self.source(2, z, e) {
                                            dxc[base + sz] = dxc[base + sz] + src[i + z];
                                        }
                                    }
                                }
                                i += od;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Element>(
    x: &NdTensor<T>,
    w: &NdTensor<T>,
    b: Option<&NdTensor<T>>,
    geom: &ConvGeometry,
) -> Result<NdTensor<T>> {
    let plan = Plan::new(x.shape(), w.shape(), geom)?;
    if let Some(b) = b {
        if b.numel() != plan.c_out {
            return Err(Error::shape(
                "conv",
                format!("bias has {} entries for {} output channels", b.numel(), plan.c_out),
            ));
        }
    }
    let rows = plan.c_in * plan.taps();
    let (in_plane, out_plane) = (plan.in_plane(), plan.out_plane());
    let mut out_shape = vec![plan.n, plan.c_out];
    out_shape.extend_from_slice(&geom.output_spatial(&x.shape()[2..])?);
    let mut y = vec![T::zero(); plan.n * plan.c_out * out_plane];
    let mut col = if plan.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * out_plane]
    };
    for n in 0..plan.n {
        let xn = &x.data()[n * plan.c_in * in_plane..(n + 1) * plan.c_in * in_plane];
        let yn = &mut y[n * plan.c_out * out_plane..(n + 1) * plan.c_out * out_plane];
        if let Some(b) = b {
            for (c, chunk) in yn.chunks_mut(out_plane).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        let cols: &[T] = if plan.is_pointwise() {
            xn
        } else {
            plan.im2col(xn, &mut col);
            &col
        };
        T::gemm(
            plan.c_out,
            rows,
            out_plane,
            T::one(),
            w.data(),
            (rows as isize, 1),
            cols,
            (out_plane as isize, 1),
            T::one(),
            yn,
            (out_plane as isize, 1),
        );
    }
    NdTensor::new(out_shape, y)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<NdTensor<T>>,
    pub dw: Option<NdTensor<T>>,
    pub db: Option<NdTensor<T>>,
}

pub(crate) fn conv_backward<T: Element>(
    x: &NdTensor<T>,
    w: &NdTensor<T>,
    geom: &ConvGeometry,
    dy: &NdTensor<T>,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let plan = Plan::new(x.shape(), w.shape(), geom)?;
    let rows = plan.c_in * plan.taps();
    let (in_plane, out_plane) = (plan.in_plane(), plan.out_plane());
    let (want_dx, want_dw, want_db) = want;

    let mut dx = want_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.numel()]);
    let mut db = want_db.then(|| vec![T::zero(); plan.c_out]);
    let mut col = vec![T::zero(); if plan.is_pointwise() { 0 } else { rows * out_plane }];
    let mut dcol = if want_dx && !plan.is_pointwise() {
        vec![T::zero(); rows * out_plane]
    } else {
        Vec::new()
    };

    for n in 0..plan.n {
        let xn = &x.data()[n * plan.c_in * in_plane..(n + 1) * plan.c_in * in_plane];
        let dyn_ = &dy.data()[n * plan.c_out * out_plane..(n + 1) * plan.c_out * out_plane];
        if let Some(db) = db.as_mut() {
            for (c, chunk) in dyn_.chunks(out_plane).enumerate() {
                db[c] = db[c] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if plan.is_pointwise() {
                xn
            } else {
                plan.im2col(xn, &mut col);
                &col
            };
            // dW (c_out x rows) += dY (c_out x P) · col^T (P x rows)
            T::gemm(
                plan.c_out,
                out_plane,
                rows,
                T::one(),
                dyn_,
                (out_plane as isize, 1),
                cols,
                (1, out_plane as isize),
                T::one(),
                dw,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * plan.c_in * in_plane..(n + 1) * plan.c_in * in_plane];
            // dcol (rows x P) = W^T (rows x c_out) · dY (c_out x P)
            if plan.is_pointwise() {
                T::gemm(
                    rows,
                    plan.c_out,
                    out_plane,
                    T::one(),
                    w.data(),
                    (1, rows as isize),
                    dyn_,
                    (out_plane as isize, 1),
                    T::one(),
                    dxn,
                    (out_plane as isize, 1),
                );
            } else {
                T::gemm(
                    rows,
                    plan.c_out,
                    out_plane,
                    T::one(),
                    w.data(),
                    (1, rows as isize),
                    dyn_,
                    (out_plane as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (out_plane as isize, 1),
                );
                plan.col2im(&dcol, dxn);
            }
        }
    }

    Ok(ConvGrads {
        dx: dx.map(|d| NdTensor::new(x.shape().to_vec(), d)).transpose()?,
        dw: dw.map(|d| NdTensor::new(w.shape().to_vec(), d)).transpose()?,
        db: db.map(|d| NdTensor::new(vec![plan.c_out], d)).transpose()?,
    })
}
