//! Run configuration shared by every command: built-in defaults, then an
//! optional JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::combonet::{Arch, CombinerKind};
use crate::data::PhantomSpec;
use crate::error::{Error, Result};
use crate::experiments::PipelineConfig;
use crate::training::loss::LossKind;

/// Phantom dataset settings. The seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSettings {
    pub count: usize,
    /// `[depth, height, width]`.
    pub extents: [usize; 3],
    pub noise: f64,
    pub distractors: usize,
}

impl Default for PhantomSettings {
    fn default() -> Self {
        let s = PhantomSpec::default();
        Self {
            count: 16,
            extents: s.extents,
            noise: s.noise,
            distractors: s.distractors,
        }
    }
}

impl PhantomSettings {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            extents: self.extents,
            noise: self.noise,
            distractors: self.distractors,
            ..PhantomSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: String,
    /// Dataset manifest written by `phantom`.
    pub data: PathBuf,
    /// Output directory for checkpoints, logs and tables.
    pub out: PathBuf,
    pub folds: usize,
    /// One-based fold used by the loss ablation.
    pub ablation_fold: usize,
    pub ablation_losses: Vec<LossKind>,
    pub phantom: PhantomSettings,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "combonet-2d:128".into(),
            data: PathBuf::from("data/dataset.json"),
            out: PathBuf::from("runs"),
            folds: 4,
            ablation_fold: 2,
            ablation_losses: LossKind::ALL.to_vec(),
            phantom: PhantomSettings::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.pipeline.train.seed
    }

    pub fn arch(&self) -> Result<Arch> {
        self.arch.parse()
    }

    /// Combiner variant implied by the architecture (2D for plain UNets).
    pub fn combiner_kind(&self) -> Result<CombinerKind> {
        Ok(match self.arch()? {
            Arch::ComboNet { kind, .. } => kind,
            Arch::UNet { .. } => CombinerKind::TwoD,
        })
    }

    /// Pipeline settings with the in-plane extent taken from the architecture.
    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let mut pc = self.pipeline.clone();
        pc.in_plane = match self.arch()? {
            Arch::UNet { dims: 3, in_plane } => in_plane * crate::combonet::AXIAL_FACTOR,
            Arch::UNet { in_plane, .. } | Arch::ComboNet { in_plane, .. } => in_plane,
        };
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        let pc = self.pipeline()?;
        pc.train.validate()?;
        pc.combo_config(self.combiner_kind()?)?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.ablation_fold == 0 || self.ablation_fold > self.folds {
            return Err(Error::Config(format!(
                "ablation_fold {} outside 1..={}",
                self.ablation_fold, self.folds
            )));
        }
        if self.phantom.count == 0 {
            return Err(Error::Config("phantom count must be positive".into()));
        }
        self.phantom.spec(self.seed()).validate()
    }
}

/// `HxWxD`, e.g. `128x128x40`, as `[depth, height, width]`.
pub fn parse_size(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad size `{s}`, expected HxWxD")))?;
    match parts[..] {
        [h, w, d] => Ok([d, h, w]),
        _ => Err(Error::Config(format!("bad size `{s}`, expected HxWxD"))),
    }
}
