//! End-to-end pipeline, k-fold cross-validation and the loss ablation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::combonet::{CombinerKind, ComboNetConfig, ComboVariant};
use crate::data::{split_folds, DatasetManifest, FoldSplit, Image, Mask};
use crate::error::{Error, Result};
use crate::inference::{dice_per_slice, infer_volume, plan_chunks, DiceReport, DEFAULT_MAX_SLICES};
use crate::model::LoadedModel;
use crate::training::loss::LossKind;
use crate::training::samples::{prepare_windows, WindowSample};
use crate::training::stages::{assemble, train_combiner, train_unet, MetricRecord, Stage, TrainConfig};

/// A labelled volume.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    /// Full-resolution in-plane extent.
    pub in_plane: usize,
    pub depth_window: usize,
    pub width_divisor_2d: usize,
    pub width_divisor_3d: usize,
    pub combiner_width: usize,
    pub max_slices: usize,
    /// Windows per inference forward pass.
    pub batch_windows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            in_plane: 128,
            depth_window: 20,
            width_divisor_2d: 8,
            width_divisor_3d: 16,
            combiner_width: crate::combonet::DEFAULT_COMBINER_WIDTH,
            max_slices: DEFAULT_MAX_SLICES,
            batch_windows: 1,
        }
    }
}

impl PipelineConfig {
    pub fn combo_config(&self, kind: CombinerKind) -> Result<ComboNetConfig> {
        let mut c = ComboNetConfig::for_extent(
            kind,
            self.in_plane,
            self.depth_window,
            self.width_divisor_2d,
            self.width_divisor_3d,
        )?;
        c.variant = ComboVariant {
            kind,
            combiner_width: self.combiner_width,
        };
        Ok(c)
    }
}

/// Checkpoints produced by stages i-iv for both combiner variants.
pub struct PipelineModels {
    pub unet2d: Checkpoint<f32>,
    pub unet3d: Checkpoint<f32>,
    pub combiners: Vec<(CombinerKind, Checkpoint<f32>)>,
    pub assembled: Vec<(CombinerKind, Checkpoint<f32>)>,
    pub metrics: Vec<MetricRecord>,
}

impl PipelineModels {
    pub fn assembled(&self, kind: CombinerKind) -> Option<&Checkpoint<f32>> {
        self.assembled.iter().find(|(k, _)| *k == kind).map(|(_, c)| c)
    }
}

/// Every volume listed in a dataset manifest.
pub fn load_cases(manifest: &Path) -> Result<Vec<Case>> {
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::load(manifest)?
        .volumes
        .iter()
        .map(|e| {
            let (image, mask) = e.load(root)?;
            Ok(Case {
                id: e.id.clone(),
                image,
                mask,
            })
        })
        .collect()
}

pub fn prepare_cases(cases: &[Case], depth_window: usize) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for c in cases {
        out.extend(prepare_windows(&c.image, &c.mask, depth_window)?);
    }
    Ok(out)
}

/// Stages i-iv on `cases`, for each combiner variant in `kinds`.
pub fn train_pipeline(cases: &[Case], pc: &PipelineConfig, kinds: &[CombinerKind]) -> Result<PipelineModels> {
    let samples = prepare_cases(cases, pc.depth_window)?;
    let base = pc.combo_config(CombinerKind::TwoD)?;
    log::info!("stage {}: {} windows", Stage::Train2d, samples.len());
    let s2 = train_unet(Stage::Train2d, base.unet2d.clone(), &samples, &pc.train)?;
    log::info!("stage {}", Stage::Train3d);
    let s3 = train_unet(Stage::Train3d, base.unet3d.clone(), &samples, &pc.train)?;
    let mut metrics = s2.metrics;
    metrics.extend(s3.metrics);
    let mut combiners = Vec::new();
    let mut assembled = Vec::new();
    for &kind in kinds {
        log::info!("stage {} ({:?})", Stage::TrainCombiner, kind);
        let variant = pc.combo_config(kind)?.variant;
        let lineage = vec!["unet2d".to_string(), "unet3d".to_string()];
        let sc = train_combiner(&s2.checkpoint, &s3.checkpoint, variant, &samples, &pc.train, lineage)?;
        metrics.extend(sc.metrics);
        let lineage = vec!["unet2d".into(), "unet3d".into(), format!("combiner-{}d", kind.dims())];
        let ck = assemble(&s2.checkpoint, &s3.checkpoint, &sc.checkpoint, lineage)?;
        combiners.push((kind, sc.checkpoint));
        assembled.push((kind, ck));
    }
    Ok(PipelineModels {
        unet2d: s2.checkpoint,
        unet3d: s3.checkpoint,
        combiners,
        assembled,
        metrics,
    })
}

/// Mean per-slice dice of `ck` over `cases`, slices pooled across volumes.
pub fn evaluate(ck: &Checkpoint<f32>, cases: &[Case], pc: &PipelineConfig) -> Result<DiceReport> {
    let mut model = LoadedModel::from_checkpoint(ck)?;
    let mut reports = Vec::with_capacity(cases.len());
    for c in cases {
        let plan = plan_chunks(c.image.depth(), pc.max_slices, pc.depth_window)?;
        let pred = infer_volume(&mut model, &c.image, &plan, pc.batch_windows)?;
        reports.push(dice_per_slice(&pred, &c.mask)?);
    }
    Ok(DiceReport::pooled(&reports))
}

pub const CV_COLUMNS: [&str; 4] = ["2D", "3D", "ComboNet-2D", "ComboNet-3D"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub fold: usize,
    /// Mean per-slice dice per column; `None` when the fold failed.
    pub dice: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub split: FoldSplit,
    pub rows: Vec<CvRow>,
    pub mean: Vec<Option<f64>>,
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl CvTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<6}", "fold");
        for c in CV_COLUMNS {
            let _ = write!(out, " {c:>12}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<6}", r.fold + 1);
            for &v in &r.dice {
                let _ = write!(out, " {:>12}", fmt_cell(v));
            }
            if let Some(e) = &r.error {
                let _ = write!(out, "  ({e})");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<6}", "mean");
        for &v in &self.mean {
            let _ = write!(out, " {:>12}", fmt_cell(v));
        }
        out.push('\n');
        out
    }
}

fn column_means(rows: &[Vec<Option<f64>>], width: usize) -> Vec<Option<f64>> {
    (0..width)
        .map(|c| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

fn subset(cases: &[Case], ids: &[usize]) -> Vec<Case> {
    ids.iter().map(|&i| cases[i].clone()).collect()
}

/// Train on k-1 folds, evaluate the four model columns on the held-out fold.
/// A failing fold is recorded and the remaining folds still run.
pub fn run_cross_validation(cases: &[Case], k: usize, pc: &PipelineConfig) -> Result<CvTable> {
    let split = split_folds(cases.len(), k, pc.train.seed)?;
    let mut rows = Vec::with_capacity(k);
    for fold in 0..k {
        log::info!("fold {}/{k}", fold + 1);
        let train = subset(cases, &split.rest(fold));
        let test = subset(cases, &split.fold(fold));
        let result = (|| -> Result<Vec<Option<f64>>> {
            let m = train_pipeline(&train, pc, &[CombinerKind::TwoD, CombinerKind::ThreeD])?;
            let mut dice = vec![
                Some(evaluate(&m.unet2d, &test, pc)?.mean),
                Some(evaluate(&m.unet3d, &test, pc)?.mean),
            ];
            for (_, ck) in &m.assembled {
                dice.push(Some(evaluate(ck, &test, pc)?.mean));
            }
            Ok(dice)
        })();
        rows.push(match result {
            Ok(dice) => CvRow { fold, dice, error: None },
            Err(e) => CvRow {
                fold,
                dice: vec![None; CV_COLUMNS.len()],
                error: Some(e.to_string()),
            },
        });
    }
    let mean = column_means(&rows.iter().map(|r| r.dice.clone()).collect::<Vec<_>>(), CV_COLUMNS.len());
    Ok(CvTable { split, rows, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss: LossKind,
    pub dice: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fold: usize,
    pub alpha: f64,
    pub beta: f64,
    pub smooth: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# fold={} alpha={} beta={} smooth={}\n{:<14} {:>8}\n",
            self.fold + 1,
            self.alpha,
            self.beta,
            self.smooth,
            "loss",
            "dice"
        );
        for r in &self.rows {
            let _ = write!(out, "{:<14} {:>8}", r.loss.name(), fmt_cell(r.dice));
            if let Some(e) = &r.error {
                let _ = write!(out, "  ({e})");
            }
            out.push('\n');
        }
        out
    }
}

/// Train the 2D network once per loss with identical seed and budget and
/// evaluate on fold `fold`.
pub fn run_loss_ablation(
    cases: &[Case],
    k: usize,
    fold: usize,
    losses: &[LossKind],
    pc: &PipelineConfig,
) -> Result<AblationTable> {
    let split = split_folds(cases.len(), k, pc.train.seed)?;
    if fold >= k {
        return Err(Error::Config(format!("fold {} out of range for k={k}", fold + 1)));
    }
    let train = prepare_cases(&subset(cases, &split.rest(fold)), pc.depth_window)?;
    let test = subset(cases, &split.fold(fold));
    let config = pc.combo_config(CombinerKind::TwoD)?.unet2d;
    let rows = losses
        .iter()
        .map(|&loss| {
            log::info!("ablation: {}", loss.name());
            let tc = TrainConfig {
                loss,
                ..pc.train.clone()
            };
            let r = train_unet(Stage::Train2d, config.clone(), &train, &tc).and_then(|s| evaluate(&s.checkpoint, &test, pc));
            match r {
                Ok(rep) => AblationRow {
                    loss,
                    dice: Some(rep.mean),
                    error: None,
                },
                Err(e) => AblationRow {
                    loss,
                    dice: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let p = pc.train.loss_params;
    Ok(AblationTable {
        fold,
        alpha: p.alpha,
        beta: p.beta,
        smooth: p.smooth,
        rows,
    })
}
