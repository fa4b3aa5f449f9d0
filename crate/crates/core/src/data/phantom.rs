//! Synthetic aorta-like phantoms with exact ground truth.
//!
//! Two vertical tubes rise from the bottom slice and are joined near the top
//! by a half-torus arch. Small bright ellipsoids ("distractors") are placed
//! away from the tube; they look like foreground in any single slice but are
//! not part of the mask.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, Mask, Volume};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `[D, H, W]`.
    pub extents: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Tube radius range as a fraction of the in-plane width.
    pub tube_radius: [f64; 2],
    /// Height of the arch as a fraction of the slice count.
    pub arch_height: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub distractors: usize,
    /// In-plane distractor radius range, fraction of the width.
    pub distractor_radius: [f64; 2],
    /// Distractor half-extent along the slice axis, in slices.
    pub distractor_slices: [usize; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extents: [40, 128, 128],
            spacing_mm: [1.0, 0.33, 0.33],
            tube_radius: [0.045, 0.065],
            arch_height: 0.25,
            noise: 0.05,
            distractors: 4,
            distractor_radius: [0.03, 0.05],
            distractor_slices: [2, 3],
        }
    }
}

/// Highest background intensity; foreground never drops below 0.7.
const BACKGROUND_MAX: f64 = 0.3;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.extents;
        if h != w || h < 64 || !h.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "phantom in-plane extent must be a square power of two >= 64, got {h}x{w}"
            )));
        }
        if d < 8 {
            return Err(Error::InvalidArgument(format!("phantom needs at least 8 slices, got {d}")));
        }
        let ranged = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1] < 0.2;
        if !ranged(self.tube_radius) || !ranged(self.distractor_radius) {
            return Err(Error::InvalidArgument("radius ranges must satisfy 0 < lo <= hi < 0.2".into()));
        }
        if !(self.arch_height > 0.0 && self.arch_height < 0.6) || !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("arch height must be in (0, 0.6) and noise >= 0".into()));
        }
        if self.distractor_slices[0] > self.distractor_slices[1] {
            return Err(Error::InvalidArgument("distractor slice range is inverted".into()));
        }
        Ok(())
    }
}

struct Arch {
    cy: f64,
    cx: f64,
    half_span: f64,
    radius: f64,
    top: f64,
    height: f64,
}

impl Arch {
    /// Distance from voxel `(z, y, x)` to the tube centre line, with the arch
    /// region rescaled along z so the arch is a half-torus.
    fn distance(&self, z: f64, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        if z <= self.top {
            let dx = (x - self.cx).abs() - self.half_span;
            (dx * dx + dy * dy).sqrt()
        } else {
            let zs = (z - self.top) * self.half_span / self.height;
            let ring = ((x - self.cx).powi(2) + zs * zs).sqrt() - self.half_span;
            (ring * ring + dy * dy).sqrt()
        }
    }
}

struct Blob {
    z: f64,
    y: f64,
    x: f64,
    r: f64,
    rz: f64,
    level: f64,
}

impl Blob {
    fn inside(&self, z: f64, y: f64, x: f64, grow: f64) -> bool {
        let q = ((y - self.y).powi(2) + (x - self.x).powi(2)) / (self.r + grow).powi(2)
            + (z - self.z).powi(2) / (self.rz + grow).powi(2);
        q <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Deterministic phantom: same spec, same bytes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Image, Mask)> {
    spec.validate()?;
    let [d, h, w] = spec.extents;
    let (df, wf) = (d as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let radius = uniform(&mut rng, spec.tube_radius) * wf;
    let half_span = rng.gen_range(0.15..0.21) * wf;
    let cx = wf / 2.0 + rng.gen_range(-0.06..0.06) * wf;
    let cy = wf / 2.0 + rng.gen_range(-0.08..0.08) * wf;
    let height = spec.arch_height * df;
    // keep the crown of the arch two slices below the top
    let top = df - 2.0 - (half_span + radius) * height / half_span;
    let arch = Arch {
        cy,
        cx,
        half_span,
        radius,
        top,
        height,
    };
    let tube_level = rng.gen_range(0.75..0.85);
    let phase: [f64; 3] = [rng.gen::<f64>() * 2.0 * PI, rng.gen::<f64>() * 2.0 * PI, rng.gen::<f64>() * 2.0 * PI];
    let freq: [f64; 2] = [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)];

    let mut mask = vec![0u8; d * h * w];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if arch.distance(z as f64, y as f64, x as f64) <= arch.radius {
                    mask[idx(z, y, x)] = 1;
                }
            }
        }
    }

    let mut blobs: Vec<Blob> = Vec::new();
    let mut attempts = 0;
    while blobs.len() < spec.distractors {
        attempts += 1;
        if attempts > 1000 * (spec.distractors + 1) {
            return Err(Error::InvalidArgument("could not place distractors clear of the tube".into()));
        }
        let r = uniform(&mut rng, spec.distractor_radius) * wf;
        let rz = rng.gen_range(spec.distractor_slices[0]..=spec.distractor_slices[1]) as f64;
        let blob = Blob {
            z: rng.gen_range(rz..(df - 1.0 - rz).max(rz + 1.0)),
            y: rng.gen_range(r + 2.0..wf - r - 2.0),
            x: rng.gen_range(r + 2.0..wf - r - 2.0),
            r,
            rz,
            level: rng.gen_range(0.75..0.85),
        };
        // two-voxel clearance from the tube and from other blobs
        let clear_of_tube = bounding(&blob, 2.0, [d, h, w])
            .all(|(z, y, x)| !blob.inside(z as f64, y as f64, x as f64, 2.0) || mask[idx(z, y, x)] == 0);
        let clear_of_blobs = blobs.iter().all(|o| {
            let dist = ((o.y - blob.y).powi(2) + (o.x - blob.x).powi(2)).sqrt();
            dist > o.r + blob.r + 3.0 || (o.z - blob.z).abs() > o.rz + blob.rz + 3.0
        });
        if clear_of_tube && clear_of_blobs {
            blobs.push(blob);
        }
    }

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut image = vec![0f32; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                let bg = 0.15
                    + 0.1 * (2.0 * PI * freq[0] * xf / wf + phase[0]).sin() * (2.0 * PI * freq[1] * yf / wf + phase[1]).cos()
                    + 0.05 * (2.0 * PI * zf / df + phase[2]).sin();
                let mut v = bg.min(BACKGROUND_MAX);
                if mask[idx(z, y, x)] == 1 {
                    v = tube_level;
                } else if let Some(b) = blobs.iter().find(|b| b.inside(zf, yf, xf, 0.0)) {
                    v = b.level;
                }
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                image[idx(z, y, x)] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((
        Volume::new(spec.extents, spec.spacing_mm, image)?,
        Volume::new(spec.extents, spec.spacing_mm, mask)?,
    ))
}

fn bounding(b: &Blob, grow: f64, [d, h, w]: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> {
    let span = |c: f64, r: f64, n: usize| {
        let lo = (c - r - 1.0).floor().max(0.0) as usize;
        let hi = ((c + r + 1.0).ceil() as usize).min(n - 1);
        lo..=hi
    };
    let (zs, ys, xs) = (span(b.z, b.rz + grow, d), span(b.y, b.r + grow, h), span(b.x, b.r + grow, w));
    zs.flat_map(move |z| {
        let xs = xs.clone();
        ys.clone().flat_map(move |y| xs.clone().map(move |x| (z, y, x)))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub spec: PhantomSpec,
}

impl DatasetEntry {
    /// Load the image and mask; paths are relative to `root`.
    pub fn load(&self, root: &Path) -> Result<(Image, Mask)> {
        Ok((Image::read_cvol(&root.join(&self.image))?, Mask::read_cvol(&root.join(&self.mask))?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub volumes: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(path, &json)
    }
}

/// Write `count` phantoms (seeds `base.seed + i`) and `dataset.json` to `dir`.
pub fn generate_dataset(dir: &Path, base: &PhantomSpec, count: usize) -> Result<(PathBuf, DatasetManifest)> {
    let mut volumes = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec {
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let (image, mask) = generate_phantom(&spec)?;
        let id = format!("phantom-{i:03}");
        let entry = DatasetEntry {
            image: format!("{id}-image.cvol"),
            mask: format!("{id}-mask.cvol"),
            id,
            spec,
        };
        image.write_cvol(&dir.join(&entry.image))?;
        mask.write_cvol(&dir.join(&entry.mask))?;
        volumes.push(entry);
    }
    let manifest = DatasetManifest { volumes };
    let path = dir.join("dataset.json");
    manifest.save(&path)?;
    Ok((path, manifest))
}
