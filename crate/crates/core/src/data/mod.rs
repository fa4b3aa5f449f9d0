//! Volumes, the `.cvol` file format, resampling, slice windows and folds.

mod phantom;

pub use phantom::{generate_dataset, generate_phantom, DatasetEntry, DatasetManifest, PhantomSpec};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const CVOL_MAGIC: &[u8; 4] = b"CVOL";
pub const CVOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    F32,
    U8,
}

/// Voxel storage: `f32` images or `u8` masks.
pub trait Voxel: Copy + PartialEq + Default + std::fmt::Debug + Send + Sync + 'static {
    const TYPE: VoxelType;
    const WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn valid(self) -> bool;
}

impl Voxel for f32 {
    const TYPE: VoxelType = VoxelType::F32;
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn valid(self) -> bool {
        self.is_finite()
    }
}

impl Voxel for u8 {
    const TYPE: VoxelType = VoxelType::U8;
    const WIDTH: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }

    fn valid(self) -> bool {
        self <= 1
    }
}

/// A `D x H x W` grid, slices outermost, with spacing `(z, y, x)` in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<V> {
    extents: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<V>,
}

pub type Image = Volume<f32>;
pub type Mask = Volume<u8>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CvolHeader {
    dtype: VoxelType,
    extents: [usize; 3],
    spacing_mm: [f64; 3],
    version: u32,
}

impl<V: Voxel> Volume<V> {
    pub fn new(extents: [usize; 3], spacing_mm: [f64; 3], data: Vec<V>) -> Result<Self> {
        if extents.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "volume",
                format!("extents {:?} need {} voxels, got {}", extents, extents.iter().product::<usize>(), data.len()),
            ));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {:?}", spacing_mm)));
        }
        if let Some(v) = data.iter().find(|v| !v.valid()) {
            return Err(Error::InvalidArgument(format!("invalid voxel value {v:?}")));
        }
        Ok(Self {
            extents,
            spacing_mm,
            data,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn depth(&self) -> usize {
        self.extents[0]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    pub fn plane(&self) -> usize {
        self.extents[1] * self.extents[2]
    }

    pub fn get(&self, d: usize, y: usize, x: usize) -> V {
        self.data[(d * self.extents[1] + y) * self.extents[2] + x]
    }

    pub fn slice(&self, d: usize) -> &[V] {
        let p = self.plane();
        &self.data[d * p..(d + 1) * p]
    }

    /// Slices `start..start + len`.
    pub fn sub_volume(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.depth() || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slices {start}..{} outside depth {}",
                start + len,
                self.depth()
            )));
        }
        let p = self.plane();
        Ok(Self {
            extents: [len, self.extents[1], self.extents[2]],
            spacing_mm: self.spacing_mm,
            data: self.data[start * p..(start + len) * p].to_vec(),
        })
    }

    /// Extend to `depth` slices by repeating the last slice.
    pub fn pad_replicate(&self, depth: usize) -> Self {
        let mut data = self.data.clone();
        let last = self.slice(self.depth() - 1).to_vec();
        for _ in self.depth()..depth {
            data.extend_from_slice(&last);
        }
        Self {
            extents: [depth.max(self.depth()), self.extents[1], self.extents[2]],
            spacing_mm: self.spacing_mm,
            data,
        }
    }

    /// Concatenate along the slice axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut depth = 0;
        for p in parts {
            if p.extents[1..] != first.extents[1..] {
                return Err(Error::shape("concat", "in-plane extents differ"));
            }
            depth += p.depth();
            data.extend_from_slice(&p.data);
        }
        Self::new([depth, first.extents[1], first.extents[2]], first.spacing_mm, data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&CvolHeader {
            dtype: V::TYPE,
            extents: self.extents,
            spacing_mm: self.spacing_mm,
            version: CVOL_VERSION,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + self.data.len() * V::WIDTH);
        out.extend_from_slice(CVOL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::format(origin, detail);
        if bytes.len() < 8 || &bytes[..4] != CVOL_MAGIC {
            return Err(bad("missing CVOL magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CvolHeader =
            serde_json::from_slice(&bytes[8..body]).map_err(|e| Error::format(origin, e.to_string()))?;
        if header.version != CVOL_VERSION {
            return Err(bad("unsupported version"));
        }
        if header.dtype != V::TYPE {
            return Err(Error::format(
                origin,
                format!("stored dtype {:?}, expected {:?}", header.dtype, V::TYPE),
            ));
        }
        let n: usize = header.extents.iter().product();
        if bytes.len() - body != n * V::WIDTH {
            return Err(bad("voxel payload length does not match extents"));
        }
        let data = bytes[body..].chunks_exact(V::WIDTH).map(V::read_le).collect();
        Self::new(header.extents, header.spacing_mm, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn write_cvol(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read_cvol(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl Volume<f32> {
    /// `factor x factor` block mean in-plane; depth and z spacing unchanged.
    pub fn downsample_axial(&self, factor: usize) -> Result<Self> {
        let (sums, [d, h, w]) = block_reduce(self, factor)?;
        let area = (factor * factor) as f64;
        let data = sums.into_iter().map(|s| (s / area) as f32).collect();
        Self::new([d, h, w], axial_spacing(self.spacing_mm, factor), data)
    }
}

impl Volume<u8> {
    /// Block majority in-plane; ties count as foreground.
    pub fn downsample_axial(&self, factor: usize) -> Result<Self> {
        let (sums, [d, h, w]) = block_reduce(self, factor)?;
        let area = (factor * factor) as f64;
        let data = sums.into_iter().map(|s| u8::from(2.0 * s >= area)).collect();
        Self::new([d, h, w], axial_spacing(self.spacing_mm, factor), data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

fn axial_spacing(s: [f64; 3], factor: usize) -> [f64; 3] {
    [s[0], s[1] * factor as f64, s[2] * factor as f64]
}

fn block_reduce<V: Voxel + Into<f64>>(v: &Volume<V>, factor: usize) -> Result<(Vec<f64>, [usize; 3])> {
    let [d, h, w] = v.extents;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "downsample",
            format!("in-plane extents {h}x{w} are not divisible by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; d * oh * ow];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out[(z * oh + y / factor) * ow + x / factor] += v.get(z, y, x).into();
            }
        }
    }
    Ok((out, [d, oh, ow]))
}

/// A run of consecutive slices; `real` counts the slices taken from the
/// source, the remainder are replicas of the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<V> {
    pub start: usize,
    pub real: usize,
    pub volume: Volume<V>,
}

impl<V> Window<V> {
    pub fn pad(&self) -> usize {
        self.volume.extents[0] - self.real
    }
}

/// Disjoint `window`-slice stacks covering every slice in order.
pub fn window_slices<V: Voxel>(v: &Volume<V>, window: usize) -> Result<Vec<Window<V>>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be positive".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < v.depth() {
        let real = window.min(v.depth() - start);
        let volume = v.sub_volume(start, real)?.pad_replicate(window);
        out.push(Window { start, real, volume });
        start += real;
    }
    Ok(out)
}

/// Crop each window to its real slices and join them.
pub fn unwindow<V: Voxel>(windows: &[Window<V>]) -> Result<Volume<V>> {
    let parts = windows
        .iter()
        .map(|w| w.volume.sub_volume(0, w.real))
        .collect::<Result<Vec<_>>>()?;
    Volume::concat(&parts)
}

/// Assignment of volume indices to `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl FoldSplit {
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == f).collect()
    }

    pub fn rest(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.fold(f).len()).collect()
    }
}

/// Seeded shuffle, then round-robin assignment: sizes differ by at most one.
pub fn split_folds(count: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 || count < k {
        return Err(Error::InvalidArgument(format!("cannot split {count} volumes into {k} folds")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; count];
    for (j, &i) in order.iter().enumerate() {
        assignment[i] = j % k;
    }
    Ok(FoldSplit { k, assignment })
}
