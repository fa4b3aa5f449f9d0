//! Checkpoints: a JSON manifest next to a raw little-endian blob.
//!
//! `foo.json` lists every tensor with its byte range in `foo.bin`. Both files
//! are written to a temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::combonet::{ComboNetConfig, ComboVariant};
use crate::error::{Error, Result};
use crate::nn::{ParamEntry, ParamKind, ParamStore};
use crate::tensor::{DType, Element, NdTensor};
use crate::unet::UNetConfig;

pub const FORMAT_VERSION: u32 = 1;

/// What a checkpoint holds, with enough detail to rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelArch {
    Unet {
        prefix: String,
        config: UNetConfig,
        with_sigmoid: bool,
    },
    Combiner {
        prefix: String,
        variant: ComboVariant,
    },
    Combonet {
        config: ComboNetConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub arch: ModelArch,
    pub stage: String,
    /// File names of the checkpoints this one was derived from.
    pub lineage: Vec<String>,
    pub blob: String,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub arch: ModelArch,
    pub stage: String,
    pub lineage: Vec<String>,
    pub store: ParamStore<T>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

/// Write `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_file_name(format!(".{}.tmp", file_name(path)));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl<T: Element> Checkpoint<T> {
    pub fn new(arch: ModelArch, stage: impl Into<String>, lineage: Vec<String>, store: ParamStore<T>) -> Self {
        Self {
            arch,
            stage: stage.into(),
            lineage,
            store,
        }
    }

    /// Save as `path` (manifest) plus `path` with a `.bin` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = blob_path(path);
        let mut bytes = Vec::new();
        let mut tensors = Vec::with_capacity(self.store.len());
        for e in self.store.entries() {
            let offset = bytes.len();
            for &v in e.value.data() {
                v.write_le(&mut bytes);
            }
            tensors.push(TensorRecord {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                offset,
                nbytes: bytes.len() - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE,
            arch: self.arch.clone(),
            stage: self.stage.clone(),
            lineage: self.lineage.clone(),
            blob: file_name(&blob),
            tensors,
        };
        write_atomic(&blob, &bytes)?;
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_atomic(path, &json)
    }

    /// Load a checkpoint, converting from the stored precision if needed.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let blob = path.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let store = match manifest.dtype {
            DType::F32 => decode::<f32>(&manifest, &bytes, &blob)?.cast(),
            DType::F64 => decode::<f64>(&manifest, &bytes, &blob)?.cast(),
        };
        Ok(Self {
            arch: manifest.arch,
            stage: manifest.stage,
            lineage: manifest.lineage,
            store,
        })
    }
}

fn decode<U: Element>(manifest: &Manifest, bytes: &[u8], blob: &Path) -> Result<ParamStore<U>> {
    let width = U::DTYPE.size();
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        let end = t.offset.checked_add(t.nbytes).filter(|&e| e <= bytes.len());
        let Some(end) = end.filter(|_| t.nbytes == numel * width) else {
            return Err(Error::format(blob, format!("tensor {} has an invalid byte range", t.name)));
        };
        let data = bytes[t.offset..end].chunks_exact(width).map(U::read_le).collect();
        entries.push(ParamEntry {
            name: t.name.clone(),
            kind: t.kind,
            value: NdTensor::new(t.shape.clone(), data)?,
        });
    }
    ParamStore::from_entries(entries)
}
