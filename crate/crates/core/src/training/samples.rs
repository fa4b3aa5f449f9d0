//! Network-ready tensors cut from image/mask volume pairs.

use crate::combonet::{stack_2d_to_3d, AXIAL_FACTOR};
use crate::data::{window_slices, Image, Mask, Volume};
use crate::error::{Error, Result};
use crate::tensor::NdTensor;

/// One depth window in both layouts. `full` tensors are `(D, 1, H, W)`
/// slices; `low` tensors are `(1, 1, H/4, W/4, D)` volumes.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub full: NdTensor<f32>,
    pub full_target: NdTensor<f32>,
    pub low: NdTensor<f32>,
    pub low_target: NdTensor<f32>,
    /// Slices taken from the source (the rest replicate the last one).
    pub real: usize,
}

fn slices_tensor<V: crate::data::Voxel + Into<f64>>(v: &Volume<V>) -> NdTensor<f32> {
    let [d, h, w] = v.extents();
    let data = v.data().iter().map(|&x| Into::<f64>::into(x) as f32).collect();
    NdTensor::new(vec![d, 1, h, w], data).expect("volume extents")
}

/// Image window only (inference needs no targets).
pub fn window_inputs(image: &Image) -> Result<(NdTensor<f32>, NdTensor<f32>)> {
    let full = slices_tensor(image);
    let low = stack_2d_to_3d(&slices_tensor(&image.downsample_axial(AXIAL_FACTOR)?), image.depth())?;
    Ok((full, low))
}

/// Cut a volume pair into padded depth windows.
pub fn prepare_windows(image: &Image, mask: &Mask, depth_window: usize) -> Result<Vec<WindowSample>> {
    if image.extents() != mask.extents() {
        return Err(Error::shape(
            "prepare",
            format!("image {:?} vs mask {:?}", image.extents(), mask.extents()),
        ));
    }
    let images = window_slices(image, depth_window)?;
    let masks = window_slices(mask, depth_window)?;
    images
        .into_iter()
        .zip(masks)
        .map(|(iw, mw)| {
            let (full, low) = window_inputs(&iw.volume)?;
            let low_mask = mw.volume.downsample_axial(AXIAL_FACTOR)?;
            Ok(WindowSample {
                full,
                full_target: slices_tensor(&mw.volume),
                low,
                low_target: stack_2d_to_3d(&slices_tensor(&low_mask), depth_window)?,
                real: iw.real,
            })
        })
        .collect()
}

/// Stack tensors of identical trailing shape along the batch axis.
pub fn cat_batch(parts: &[&NdTensor<f32>]) -> Result<NdTensor<f32>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape()[1..] != shape[1..] {
            return Err(Error::shape("batch", format!("{:?} vs {:?}", p.shape(), shape)));
        }
        data.extend_from_slice(p.data());
    }
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    NdTensor::new(shape, data)
}

/// Gather single rows `(window, slice)` of the full-resolution tensors.
pub fn gather_slices(samples: &[WindowSample], picks: &[(usize, usize)]) -> (NdTensor<f32>, NdTensor<f32>) {
    let (h, w) = (samples[0].full.shape()[2], samples[0].full.shape()[3]);
    let plane = h * w;
    let mut x = Vec::with_capacity(picks.len() * plane);
    let mut t = Vec::with_capacity(picks.len() * plane);
    for &(wi, si) in picks {
        x.extend_from_slice(&samples[wi].full.data()[si * plane..(si + 1) * plane]);
        t.extend_from_slice(&samples[wi].full_target.data()[si * plane..(si + 1) * plane]);
    }
    let shape = vec![picks.len(), 1, h, w];
    (
        NdTensor::new(shape.clone(), x).expect("gathered slices"),
        NdTensor::new(shape, t).expect("gathered targets"),
    )
}
