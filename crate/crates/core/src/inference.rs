//! Chunked whole-volume inference, per-slice dice and overlay images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::{window_slices, Image, Mask, Volume};
use crate::error::{Error, Result};
use crate::model::LoadedModel;
use crate::training::samples::{cat_batch, window_inputs};

pub const DEFAULT_MAX_SLICES: usize = 120;
pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub real: usize,
    pub padded: usize,
}

impl Chunk {
    pub fn pad(&self) -> usize {
        self.padded - self.real
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunks: Vec<Chunk>,
    pub max_slices: usize,
    pub window: usize,
}

/// Greedy split of `depth` slices into chunks of at most `max_slices`
/// (rounded down to whole windows); the last chunk is padded to a window
/// multiple.
pub fn plan_chunks(depth: usize, max_slices: usize, window: usize) -> Result<ChunkPlan> {
    if window == 0 || max_slices < window {
        return Err(Error::Config(format!(
            "max_slices {max_slices} must be at least the window {window}"
        )));
    }
    let cap = max_slices / window * window;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < depth {
        let real = cap.min(depth - start);
        chunks.push(Chunk {
            start,
            real,
            padded: real.div_ceil(window) * window,
        });
        start += real;
    }
    Ok(ChunkPlan {
        chunks,
        max_slices: cap,
        window,
    })
}

/// Foreground probability per voxel. Each chunk is cut into depth windows
/// that are evaluated `batch_windows` at a time.
pub fn infer_probabilities(model: &mut LoadedModel, image: &Image, plan: &ChunkPlan, batch_windows: usize) -> Result<Image> {
    let mut parts = Vec::with_capacity(plan.chunks.len());
    for c in &plan.chunks {
        let chunk = image.sub_volume(c.start, c.real)?.pad_replicate(c.padded);
        let windows = window_slices(&chunk, plan.window)?;
        let mut probs: Vec<f32> = Vec::with_capacity(c.padded * image.plane());
        for group in windows.chunks(batch_windows.max(1)) {
            let inputs = group.iter().map(|w| window_inputs(&w.volume)).collect::<Result<Vec<_>>>()?;
            let full = cat_batch(&inputs.iter().map(|(f, _)| f).collect::<Vec<_>>())?;
            let low = cat_batch(&inputs.iter().map(|(_, l)| l).collect::<Vec<_>>())?;
            let p = model.predict_window(&full, &low)?;
            probs.extend_from_slice(p.data());
        }
        probs.truncate(c.real * image.plane());
        let [_, h, w] = image.extents();
        parts.push(Volume::new([c.real, h, w], image.spacing_mm(), probs)?);
    }
    let out = Volume::concat(&parts)?;
    if out.extents() != image.extents() {
        return Err(Error::shape(
            "infer",
            format!("output {:?} vs input {:?}", out.extents(), image.extents()),
        ));
    }
    Ok(out)
}

pub fn threshold(probs: &Image, t: f32) -> Mask {
    let data = probs.data().iter().map(|&p| u8::from(p > t)).collect();
    Volume::new(probs.extents(), probs.spacing_mm(), data).expect("same extents")
}

/// Binary mask at the 0.5 threshold.
pub fn infer_volume(model: &mut LoadedModel, image: &Image, plan: &ChunkPlan, batch_windows: usize) -> Result<Mask> {
    Ok(threshold(&infer_probabilities(model, image, plan, batch_windows)?, THRESHOLD))
}

/// Per-slice dice; `None` marks slices empty in both masks (not counted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_slice: Vec<Option<f64>>,
    pub mean: f64,
    pub volume_dice: f64,
    pub counted: usize,
    pub skipped: usize,
}

fn dice_of(inter: usize, mass: usize) -> Option<f64> {
    (mass > 0).then(|| 2.0 * inter as f64 / mass as f64)
}

pub fn dice_per_slice(pred: &Mask, truth: &Mask) -> Result<DiceReport> {
    if pred.extents() != truth.extents() {
        return Err(Error::shape(
            "dice",
            format!("prediction {:?} vs truth {:?}", pred.extents(), truth.extents()),
        ));
    }
    let (mut inter_all, mut mass_all) = (0, 0);
    let per_slice = (0..pred.depth())
        .map(|d| {
            let (mut inter, mut mass) = (0, 0);
            for (&p, &t) in pred.slice(d).iter().zip(truth.slice(d)) {
                inter += usize::from(p & t);
                mass += usize::from(p) + usize::from(t);
            }
            inter_all += inter;
            mass_all += mass;
            dice_of(inter, mass)
        })
        .collect();
    Ok(DiceReport::from_slices(per_slice, dice_of(inter_all, mass_all).unwrap_or(1.0)))
}

impl DiceReport {
    fn from_slices(per_slice: Vec<Option<f64>>, volume_dice: f64) -> Self {
        let counted: Vec<f64> = per_slice.iter().flatten().copied().collect();
        let mean = if counted.is_empty() {
            1.0
        } else {
            counted.iter().sum::<f64>() / counted.len() as f64
        };
        Self {
            skipped: per_slice.len() - counted.len(),
            counted: counted.len(),
            per_slice,
            mean,
            volume_dice,
        }
    }

    /// Slices of several volumes pooled into one report. Volume dice is the
    /// mean of the per-volume values.
    pub fn pooled(reports: &[DiceReport]) -> Self {
        let slices = reports.iter().flat_map(|r| r.per_slice.iter().copied()).collect();
        let vol = if reports.is_empty() {
            1.0
        } else {
            reports.iter().map(|r| r.volume_dice).sum::<f64>() / reports.len() as f64
        };
        Self::from_slices(slices, vol)
    }
}

/// Slice `d` in grey with the prediction boundary in red and, when given,
/// the truth boundary in green (yellow where they coincide). Binary PPM.
pub fn write_overlay(path: &Path, image: &Image, pred: &Mask, truth: Option<&Mask>, d: usize) -> Result<()> {
    let [depth, h, w] = image.extents();
    if d >= depth || pred.extents() != image.extents() || truth.is_some_and(|t| t.extents() != image.extents()) {
        return Err(Error::InvalidArgument(format!("overlay slice {d} or extents out of range")));
    }
    let edge = |m: &Mask, y: usize, x: usize| {
        m.get(d, y, x) == 1
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || m.get(d, y - 1, x) == 0
                || m.get(d, y + 1, x) == 0
                || m.get(d, y, x - 1) == 0
                || m.get(d, y, x + 1) == 0)
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let g = (image.get(d, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            let mut px = [g, g, g];
            let p = edge(pred, y, x);
            let t = truth.is_some_and(|t| edge(t, y, x));
            if p || t {
                px = [if p { 255 } else { 0 }, if t { 255 } else { 0 }, 0];
            }
            out.extend_from_slice(&px);
        }
    }
    write_atomic(path, &out)
}
