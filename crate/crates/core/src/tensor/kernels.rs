//! Pooling, resampling, normalization and layout kernels with their adjoints.

use serde::{Deserialize, Serialize};

use super::{Element, NdTensor};
use crate::error::{Error, Result};

/// Window and stride per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: Vec<usize>,
    pub stride: Vec<usize>,
}

impl PoolGeometry {
    /// Non-overlapping windows (window equals stride).
    pub fn tiles(window: Vec<usize>) -> Self {
        Self {
            stride: window.clone(),
            window,
        }
    }

    fn output_spatial(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.window.len() || self.stride.len() != self.window.len() {
            return Err(Error::shape(
                "pool",
                format!("geometry {:?} vs spatial extents {:?}", self.window, input),
            ));
        }
        input
            .iter()
            .zip(self.window.iter().zip(&self.stride))
            .map(|(&n, (&w, &s))| {
                if w == 0 || s == 0 || n < w || (n - w) % s != 0 {
                    return Err(Error::shape(
                        "pool",
                        format!("extent {n} is not divisible by window {w} / stride {s}"),
                    ));
                }
                Ok((n - w) / s + 1)
            })
            .collect()
    }
}

fn spatial3(shape: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    for (o, &v) in out.iter_mut().zip(&shape[2..]) {
        *o = v;
    }
    out
}

fn axes3(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[..v.len()].copy_from_slice(v);
    out
}

fn check_rank(op: &'static str, shape: &[usize], axes: usize) -> Result<()> {
    if shape.len() < 3 || shape.len() > 5 || shape.len() - 2 != axes {
        return Err(Error::shape(
            op,
            format!("expected (N, C, spatial x{axes}), got {:?}", shape),
        ));
    }
    Ok(())
}

/// Max pooling. Returns the pooled tensor and, for every output element, the
/// flat input index that won; ties go to the first element in scan order.
pub fn max_pool<T: Element>(x: &NdTensor<T>, geom: &PoolGeometry) -> Result<(NdTensor<T>, Vec<usize>)> {
    check_rank("max_pool", x.shape(), geom.window.len())?;
    let out_sp = geom.output_spatial(&x.shape()[2..])?;
    let (n, c, in_plane) = x.batch_channels();
    let [_, iw, id] = spatial3(x.shape());
    let [oh, ow, od] = axes3(&out_sp, 1);
    let [wh, ww, wd] = axes3(&geom.window, 1);
    let [sh, sw, sd] = axes3(&geom.stride, 1);
    let out_plane = oh * ow * od;
    let mut out = Vec::with_capacity(n * c * out_plane);
    let mut argmax = Vec::with_capacity(n * c * out_plane);
    for plane in 0..n * c {
        let base = plane * in_plane;
        let xp = &x.data()[base..base + in_plane];
        for y in 0..oh {
            for xx in 0..ow {
                for z in 0..od {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for a in 0..wh {
                        for b in 0..ww {
                            for e in 0..wd {
                                let idx = ((y * sh + a) * iw + xx * sw + b) * id + z * sd + e;
                                let v = xp[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(base + best_idx);
                }
            }
        }
    }
    let mut shape = vec![n, c];
    shape.extend_from_slice(&out_sp);
    Ok((NdTensor::new(shape, out)?, argmax))
}

pub(crate) fn max_pool_backward<T: Element>(x_shape: &[usize], argmax: &[usize], dy: &NdTensor<T>) -> NdTensor<T> {
    let mut dx = NdTensor::zeros(x_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// Mean over non-overlapping windows.
pub fn avg_pool<T: Element>(x: &NdTensor<T>, window: &[usize]) -> Result<NdTensor<T>> {
    check_rank("avg_pool", x.shape(), window.len())?;
    let geom = PoolGeometry::tiles(window.to_vec());
    let out_sp = geom.output_spatial(&x.shape()[2..])?;
    let (n, c, in_plane) = x.batch_channels();
    let [_, iw, id] = spatial3(x.shape());
    let [oh, ow, od] = axes3(&out_sp, 1);
    let [wh, ww, wd] = axes3(window, 1);
    let scale = T::one() / T::of((wh * ww * wd) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow * od);
    for plane in 0..n * c {
        let xp = &x.data()[plane * in_plane..(plane + 1) * in_plane];
        for y in 0..oh {
            for xx in 0..ow {
                for z in 0..od {
                    let mut acc = T::zero();
                    for a in 0..wh {
                        for b in 0..ww {
                            for e in 0..wd {
                                acc = acc + xp[((y * wh + a) * iw + xx * ww + b) * id + z * wd + e];
                            }
                        }
                    }
                    out.push(acc * scale);
                }
            }
        }
    }
    let mut shape = vec![n, c];
    shape.extend_from_slice(&out_sp);
    NdTensor::new(shape, out)
}

pub(crate) fn avg_pool_backward<T: Element>(x_shape: &[usize], window: &[usize], dy: &NdTensor<T>) -> NdTensor<T> {
    let [wh, ww, wd] = axes3(window, 1);
    let scale = T::one() / T::of((wh * ww * wd) as f64);
    let spread = upsample_raw(dy, &[wh, ww, wd][..window.len()]);
    debug_assert_eq!(spread.shape(), x_shape);
    spread.map(|g| g * scale)
}

/// Nearest-neighbour upsampling by an integer factor per spatial axis.
pub fn upsample_nearest<T: Element>(x: &NdTensor<T>, factors: &[usize]) -> Result<NdTensor<T>> {
    check_rank("upsample", x.shape(), factors.len())?;
    if factors.contains(&0) {
        return Err(Error::InvalidArgument("upsampling factors must be >= 1".into()));
    }
    Ok(upsample_raw(x, factors))
}

fn upsample_raw<T: Element>(x: &NdTensor<T>, factors: &[usize]) -> NdTensor<T> {
    let (n, c, in_plane) = x.batch_channels();
    let [ih, iw, id] = spatial3(x.shape());
    let [fh, fw, fd] = axes3(factors, 1);
    let (oh, ow, od) = (ih * fh, iw * fw, id * fd);
    let mut out = Vec::with_capacity(n * c * oh * ow * od);
    for plane in 0..n * c {
        let xp = &x.data()[plane * in_plane..(plane + 1) * in_plane];
        for y in 0..oh {
            for xx in 0..ow {
                let row = ((y / fh) * iw + xx / fw) * id;
                for z in 0..od {
                    out.push(xp[row + z / fd]);
                }
            }
        }
    }
    let mut shape = vec![n, c];
    shape.extend(x.shape()[2..].iter().zip(factors).map(|(&s, &f)| s * f));
    NdTensor::new(shape, out).expect("upsample shape")
}

/// Adjoint of nearest upsampling: sums each replication block.
pub(crate) fn upsample_backward<T: Element>(x_shape: &[usize], factors: &[usize], dy: &NdTensor<T>) -> NdTensor<T> {
    let (n, c, in_plane) = {
        let n = x_shape[0];
        let c = x_shape[1];
        (n, c, x_shape[2..].iter().product::<usize>())
    };
    let [ih, iw, id] = spatial3(x_shape);
    let [fh, fw, fd] = axes3(factors, 1);
    let (oh, ow, od) = (ih * fh, iw * fw, id * fd);
    let mut dx = vec![T::zero(); n * c * in_plane];
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow * od..(plane + 1) * oh * ow * od];
        let dst = &mut dx[plane * in_plane..(plane + 1) * in_plane];
        let mut i = 0;
        for y in 0..oh {
            for xx in 0..ow {
                let row = ((y / fh) * iw + xx / fw) * id;
                for z in 0..od {
                    dst[row + z / fd] = dst[row + z / fd] + src[i];
                    i += 1;
                }
            }
        }
    }
    NdTensor::new(x_shape.to_vec(), dx).expect("upsample grad shape")
}

/// Saved state for batch-norm backward.
#[derive(Debug)]
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Whether statistics came from the batch (train) or from running stats.
    pub batch_stats: bool,
}

/// Per-channel statistics over batch and spatial axes: (mean, biased variance).
pub(crate) fn channel_moments<T: Element>(x: &NdTensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, plane) = x.batch_channels();
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let s = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            acc = acc + s.iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for b in 0..n {
            let s = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            sq = sq + s.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

pub(crate) fn batch_norm_apply<T: Element>(
    x: &NdTensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    batch_stats: bool,
) -> (NdTensor<T>, BnSaved<T>) {
    let (n, c, plane) = x.batch_channels();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for i in r {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (
        NdTensor::new(x.shape().to_vec(), y).expect("bn shape"),
        BnSaved {
            xhat,
            inv_std,
            batch_stats,
        },
    )
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn batch_norm_backward<T: Element>(
    shape: &[usize],
    gamma: &[T],
    saved: &BnSaved<T>,
    dy: &NdTensor<T>,
) -> (NdTensor<T>, Vec<T>, Vec<T>) {
    let n = shape[0];
    let c = shape[1];
    let plane: usize = shape[2..].iter().product();
    let m = T::of((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                dbeta[ch] = dbeta[ch] + dy.data()[i];
                dgamma[ch] = dgamma[ch] + dy.data()[i] * saved.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * saved.inv_std[ch];
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                dx[i] = if saved.batch_stats {
                    k * (dy.data()[i] - dbeta[ch] / m - saved.xhat[i] * dgamma[ch] / m)
                } else {
                    k * dy.data()[i]
                };
            }
        }
    }
    (NdTensor::new(shape.to_vec(), dx).expect("bn grad shape"), dgamma, dbeta)
}

/// `(N*D, C, S...)` -> `(N, C, S..., D)`: consecutive rows become depth.
pub(crate) fn stack_depth<T: Element>(x: &NdTensor<T>, depth: usize) -> Result<NdTensor<T>> {
    let shape = x.shape();
    if shape.len() < 3 || depth == 0 || shape[0] % depth != 0 {
        return Err(Error::shape(
            "stack_depth",
            format!("batch of {:?} is not divisible into depth {depth}", shape),
        ));
    }
    let (rows, c, plane) = x.batch_channels();
    let n = rows / depth;
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for d in 0..depth {
            for ch in 0..c {
                let src = &x.data()[((b * depth + d) * c + ch) * plane..((b * depth + d) * c + ch + 1) * plane];
                let dst_base = (b * c + ch) * plane * depth;
                for (p, &v) in src.iter().enumerate() {
                    out[dst_base + p * depth + d] = v;
                }
            }
        }
    }
    let mut new_shape = vec![n, c];
    new_shape.extend_from_slice(&shape[2..]);
    new_shape.push(depth);
    NdTensor::new(new_shape, out)
}

/// Inverse of [`stack_depth`]: `(N, C, S..., D)` -> `(N*D, C, S...)`.
pub(crate) fn flatten_depth<T: Element>(x: &NdTensor<T>) -> Result<NdTensor<T>> {
    let shape = x.shape();
    if shape.len() < 4 {
        return Err(Error::shape("flatten_depth", format!("no depth axis in {:?}", shape)));
    }
    let depth = *shape.last().unwrap();
    let (n, c, full_plane) = x.batch_channels();
    let plane = full_plane / depth;
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * full_plane..(b * c + ch + 1) * full_plane];
            for d in 0..depth {
                let dst_base = ((b * depth + d) * c + ch) * plane;
                for p in 0..plane {
                    out[dst_base + p] = src[p * depth + d];
                }
            }
        }
    }
    let mut new_shape = vec![n * depth, c];
    new_shape.extend_from_slice(&shape[2..shape.len() - 1]);
    NdTensor::new(new_shape, out)
}

/// Concatenate along the channel axis.
pub(crate) fn concat_channels<T: Element>(parts: &[&NdTensor<T>]) -> Result<NdTensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let shape = first.shape();
    if shape.len() < 2 {
        return Err(Error::shape("concat", "tensors need a channel axis"));
    }
    for p in parts {
        let s = p.shape();
        if s.len() != shape.len() || s[0] != shape[0] || s[2..] != shape[2..] {
            return Err(Error::shape(
                "concat",
                format!("{:?} cannot join {:?} along channels", s, shape),
            ));
        }
    }
    let n = shape[0];
    let plane: usize = shape[2..].iter().product();
    let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[1] = total_c;
    NdTensor::new(new_shape, out)
}

/// Split an upstream gradient back into the channel slices of a concat.
pub(crate) fn split_channels<T: Element>(dy: &NdTensor<T>, channels: &[usize]) -> Vec<NdTensor<T>> {
    let shape = dy.shape();
    let n = shape[0];
    let plane: usize = shape[2..].iter().product();
    let total: usize = channels.iter().sum();
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
    for b in 0..n {
        let mut offset = b * total * plane;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&dy.data()[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| {
            let mut s = shape.to_vec();
            s[1] = c;
            NdTensor::new(s, d).expect("split shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_of_four() {
        let x = NdTensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool(&x, &PoolGeometry::tiles(vec![2, 2])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn constant_pool_routes_to_first_index() {
        let x = NdTensor::full(vec![1, 1, 4, 4], 7.0f64);
        let (y, arg) = max_pool(&x, &PoolGeometry::tiles(vec![2, 2])).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let dx = max_pool_backward(x.shape(), &arg, &NdTensor::full(vec![1, 1, 2, 2], 1.0));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx.data()[0], 1.0);
        assert_eq!(dx.data()[1], 0.0);
    }

    #[test]
    fn pool_halves_extents() {
        let x = NdTensor::<f32>::zeros(vec![1, 1, 512, 512]);
        let (y, _) = max_pool(&x, &PoolGeometry::tiles(vec![2, 2])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 256, 256]);
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = NdTensor::<f32>::zeros(vec![1, 1, 5, 4]);
        assert!(max_pool(&x, &PoolGeometry::tiles(vec![2, 2])).is_err());
    }

    #[test]
    fn depth_is_kept_by_in_plane_pooling() {
        let x = NdTensor::<f32>::zeros(vec![1, 2, 8, 8, 20]);
        let (y, _) = max_pool(&x, &PoolGeometry::tiles(vec![2, 2, 1])).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4, 20]);
    }

    #[test]
    fn single_voxel_replicates() {
        let x = NdTensor::new(vec![1, 1, 1, 1], vec![2.5f32]).unwrap();
        let y = upsample_nearest(&x, &[4, 4]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn upsample_then_average_is_identity() {
        let x = NdTensor::from_fn(vec![2, 3, 4, 5], |i| (i as f64).sin());
        let y = avg_pool(&upsample_nearest(&x, &[2, 2]).unwrap(), &[2, 2]).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn axial_upsample_of_3d_logits() {
        let x = NdTensor::<f32>::zeros(vec![4, 1, 16, 16, 20]);
        let y = upsample_nearest(&x, &[4, 4, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 1, 64, 64, 20]);
    }

    #[test]
    fn stack_indexing_oracle() {
        // element (b, :, y, x, d) comes from row b*D + d
        let (b, d, h, w) = (2, 3, 2, 2);
        let x = NdTensor::from_fn(vec![b * d, 1, h, w], |i| i as f32);
        let s = stack_depth(&x, d).unwrap();
        assert_eq!(s.shape(), &[b, 1, h, w, d]);
        for bb in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    for dd in 0..d {
                        let got = s.data()[((bb * h + yy) * w + xx) * d + dd];
                        let want = x.data()[((bb * d + dd) * h + yy) * w + xx];
                        assert_eq!(got, want);
                    }
                }
            }
        }
        assert_eq!(flatten_depth(&s).unwrap(), x);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = NdTensor::from_fn(vec![2, 1, 3, 3], |i| i as f32);
        let b = NdTensor::from_fn(vec![2, 2, 3, 3], |i| -(i as f32));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 3]);
        let parts = split_channels(&c, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
