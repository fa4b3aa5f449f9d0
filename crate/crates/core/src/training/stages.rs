//! The staged workflow: train the 2D and 3D networks separately, train the
//! combiner on their cached logits, assemble, then optionally fine-tune end
//! to end with smaller rates for the sub-networks.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_on_graph, ComboLossParams, LossKind};
use super::optim::{Optimizer, OptimizerConfig};
use super::samples::{cat_batch, gather_slices, WindowSample};
use super::schedule::{cosine_lr, ScheduleParams};
use crate::checkpoint::{Checkpoint, ModelArch};
use crate::combonet::{ComboNet, ComboNetConfig, ComboVariant, Combiner, GROUP_2D, GROUP_3D, GROUP_COMBINER};
use crate::error::{Error, Result};
use crate::model::{LoadedModel, Model};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::{NdTensor, Var};
use crate::unet::{UNet, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Train2d,
    Train3d,
    TrainCombiner,
    Assemble,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Train2d,
        Stage::Train3d,
        Stage::TrainCombiner,
        Stage::Assemble,
        Stage::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train2d => "train-2d",
            Stage::Train3d => "train-3d",
            Stage::TrainCombiner => "train-combiner",
            Stage::Assemble => "assemble",
            Stage::Finetune => "finetune",
        }
    }

    fn index(self) -> u64 {
        Stage::ALL.iter().position(|&s| s == self).unwrap_or(0) as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    /// Accepts `train-2d` as well as the short `2d`, `3d`, `combiner`.
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s || st.name().strip_prefix("train-") == Some(s))
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Peak learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub unet2d: f64,
    pub unet3d: f64,
    pub combiner: f64,
}

impl GroupRates {
    pub fn get(&self, group: &str) -> f64 {
        match group {
            GROUP_2D => self.unet2d,
            GROUP_3D => self.unet3d,
            GROUP_COMBINER => self.combiner,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: Stage,
    pub rates: GroupRates,
    pub epoch: usize,
    /// Checkpoints this stage was seeded from.
    pub lineage: Vec<String>,
}

impl StageState {
    /// Rates for `stage`: only the trained group moves, except in fine-tuning
    /// where the sub-networks run `k` times slower than the combiner.
    pub fn new(stage: Stage, lr_max: f64, finetune_k: f64, lineage: Vec<String>) -> Self {
        let only = |g: &str| GroupRates {
            unet2d: if g == GROUP_2D { lr_max } else { 0.0 },
            unet3d: if g == GROUP_3D { lr_max } else { 0.0 },
            combiner: if g == GROUP_COMBINER { lr_max } else { 0.0 },
        };
        let rates = match stage {
            Stage::Train2d => only(GROUP_2D),
            Stage::Train3d => only(GROUP_3D),
            Stage::TrainCombiner => only(GROUP_COMBINER),
            Stage::Assemble => only(""),
            Stage::Finetune => GroupRates {
                unet2d: lr_max / finetune_k,
                unet3d: lr_max / finetune_k,
                combiner: lr_max,
            },
        };
        Self {
            stage,
            rates,
            epoch: 0,
            lineage,
        }
    }

    /// Number of upstream checkpoints the stage needs.
    pub fn required_inputs(stage: Stage) -> usize {
        match stage {
            Stage::Train2d | Stage::Train3d => 0,
            Stage::TrainCombiner => 2,
            Stage::Assemble => 3,
            Stage::Finetune => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub loss_params: ComboLossParams,
    pub optimizer: OptimizerConfig,
    pub lr_max: f64,
    /// Peak rate of the combiner-only stage; the combiner is tiny and starts
    /// from scratch on top of converged sub-networks.
    pub lr_combiner: f64,
    pub epochs_2d: usize,
    pub epochs_3d: usize,
    pub epochs_combiner: usize,
    pub epochs_finetune: usize,
    /// Slices per 2D step.
    pub batch_slices: usize,
    /// Depth windows per 3D, combiner or fine-tuning step.
    pub batch_windows: usize,
    /// Sub-network rate divisor during fine-tuning.
    pub finetune_k: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Combo,
            loss_params: ComboLossParams::default(),
            optimizer: OptimizerConfig::default(),
            lr_max: 1e-3,
            lr_combiner: 1e-2,
            epochs_2d: 8,
            epochs_3d: 12,
            epochs_combiner: 6,
            epochs_finetune: 1,
            batch_slices: 8,
            batch_windows: 1,
            finetune_k: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_params.validate()?;
        if !(self.lr_max > 0.0) || !(self.lr_combiner > 0.0) || self.batch_slices == 0 || self.batch_windows == 0 {
            return Err(Error::Config("learning rates and batch sizes must be positive".into()));
        }
        if !(self.finetune_k >= 1.0) {
            return Err(Error::Config(format!("finetune_k must be >= 1, got {}", self.finetune_k)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
    pub dice: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} stage={} lr={:.6e} loss={:.6} dice={:.4}",
            self.step, self.stage, self.lr, self.loss, self.dice
        )
    }
}

pub struct StageOutput {
    pub checkpoint: Checkpoint<f32>,
    pub state: StageState,
    pub metrics: Vec<MetricRecord>,
}

/// Dice of the 0.5-thresholded prediction; 1 when both sides are empty.
pub fn hard_dice(p: &[f32], t: &[f32]) -> f64 {
    let (mut inter, mut mass) = (0usize, 0usize);
    for (&p, &t) in p.iter().zip(t) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += usize::from(p && t);
        mass += usize::from(p) + usize::from(t);
    }
    if mass == 0 {
        1.0
    } else {
        2.0 * inter as f64 / mass as f64
    }
}

struct Trainer<'a> {
    tc: &'a TrainConfig,
    state: StageState,
    opt: Optimizer<f32>,
    schedule: ScheduleParams,
    step: usize,
    metrics: Vec<MetricRecord>,
}

impl<'a> Trainer<'a> {
    fn new(tc: &'a TrainConfig, state: StageState, steps_per_epoch: usize, epochs: usize) -> Self {
        Self {
            tc,
            state,
            opt: Optimizer::new(tc.optimizer),
            schedule: ScheduleParams::for_peak(tc.lr_max, steps_per_epoch, epochs),
            step: 0,
            metrics: Vec::new(),
        }
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Diverged {
                stage: self.state.stage.to_string(),
                step: self.step,
            },
            other => other,
        }
    }

    fn frozen(&self) -> Vec<&'static str> {
        [GROUP_2D, GROUP_3D, GROUP_COMBINER]
            .into_iter()
            .filter(|g| self.state.rates.get(g) == 0.0)
            .collect()
    }

    /// One optimizer step on the loss between `model`'s probabilities and `target`.
    fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        target: &NdTensor<f32>,
        model: impl FnOnce(&mut Forward<'_, f32>) -> Result<Var>,
    ) -> Result<()> {
        let mut f = Forward::new(store, Mode::Train);
        for g in self.frozen() {
            f = f.freeze(g);
        }
        let (loss, dice, grads) = (|| {
            let p = model(&mut f)?;
            let loss = loss_on_graph(&mut f.graph, self.tc.loss, p, target, &self.tc.loss_params)?;
            let value = f64::from(f.value(loss)?.item()?);
            let dice = hard_dice(f.value(p)?.data(), target.data());
            let grads = f.backward(loss)?;
            Ok((value, dice, grads))
        })()
        .map_err(|e| self.diverged(e))?;
        if !loss.is_finite() {
            return Err(self.diverged(Error::NonFinite { op: "loss" }));
        }
        let factor = cosine_lr(self.step, &self.schedule) / self.schedule.lr_max;
        let rates = self.state.rates;
        self.opt
            .step(store, &grads, |g| rates.get(g) * factor)
            .map_err(|e| self.diverged(e))?;
        self.metrics.push(MetricRecord {
            step: self.step,
            stage: self.state.stage,
            lr: self.tc.lr_max * factor,
            loss,
            dice,
        });
        self.step += 1;
        Ok(())
    }

    fn finish(mut self, arch: ModelArch, store: ParamStore<f32>, epochs: usize) -> StageOutput {
        self.state.epoch = epochs;
        let checkpoint = Checkpoint::new(arch, self.state.stage.name(), self.state.lineage.clone(), store);
        StageOutput {
            checkpoint,
            state: self.state,
            metrics: self.metrics,
        }
    }
}

fn stage_rng(tc: &TrainConfig, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tc.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage.index()))
}

fn steps(items: usize, batch: usize) -> usize {
    items.div_ceil(batch).max(1)
}

/// Stages i and ii: train one UNet (with its sigmoid) from scratch.
pub fn train_unet(stage: Stage, config: UNetConfig, samples: &[WindowSample], tc: &TrainConfig) -> Result<StageOutput> {
    tc.validate()?;
    let (prefix, epochs) = match (stage, config.dims) {
        (Stage::Train2d, 2) => (GROUP_2D, tc.epochs_2d),
        (Stage::Train3d, 3) => (GROUP_3D, tc.epochs_3d),
        _ => {
            return Err(Error::Config(format!(
                "stage {stage} cannot train a {}D network",
                config.dims
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    let mut rng = stage_rng(tc, stage);
    let mut store = ParamStore::new();
    let net = UNet::new(&mut store, prefix, config.clone(), true, &mut rng)?;
    let state = StageState::new(stage, tc.lr_max, tc.finetune_k, Vec::new());
    if stage == Stage::Train2d {
        let mut picks: Vec<(usize, usize)> = samples
            .iter()
            .enumerate()
            .flat_map(|(w, s)| (0..s.real).map(move |d| (w, d)))
            .collect();
        let mut trainer = Trainer::new(tc, state, steps(picks.len(), tc.batch_slices), epochs);
        for _ in 0..epochs {
            picks.shuffle(&mut rng);
            for chunk in picks.chunks(tc.batch_slices) {
                let (x, t) = gather_slices(samples, chunk);
                trainer.step(&mut store, &t, |f| {
                    let x = f.input(x)?;
                    net.forward(f, x)
                })?;
            }
        }
        let arch = ModelArch::Unet {
            prefix: prefix.into(),
            config,
            with_sigmoid: true,
        };
        return Ok(trainer.finish(arch, store, epochs));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trainer = Trainer::new(tc, state, steps(order.len(), tc.batch_windows), epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_windows) {
            let x = cat_batch(&chunk.iter().map(|&i| &samples[i].low).collect::<Vec<_>>())?;
            let t = cat_batch(&chunk.iter().map(|&i| &samples[i].low_target).collect::<Vec<_>>())?;
            trainer.step(&mut store, &t, |f| {
                let x = f.input(x)?;
                net.forward(f, x)
            })?;
        }
    }
    let arch = ModelArch::Unet {
        prefix: prefix.into(),
        config,
        with_sigmoid: true,
    };
    Ok(trainer.finish(arch, store, epochs))
}

/// Sub-network logits for one window, computed once with frozen weights.
#[derive(Clone, Debug)]
pub struct CachedLogits {
    pub logits2d: NdTensor<f32>,
    pub logits3d: NdTensor<f32>,
}

fn unet_of(m: &LoadedModel, dims: usize) -> Result<&UNet> {
    match &m.model {
        Model::UNet(net) if net.config.dims == dims => Ok(net),
        _ => Err(Error::Config(format!("expected a {dims}D UNet checkpoint"))),
    }
}

/// Run both sub-networks in evaluation mode over every window.
pub fn cache_logits(ck2d: &Checkpoint<f32>, ck3d: &Checkpoint<f32>, samples: &[WindowSample]) -> Result<Vec<CachedLogits>> {
    let mut m2 = LoadedModel::from_checkpoint(ck2d)?;
    let mut m3 = LoadedModel::from_checkpoint(ck3d)?;
    let n2 = unet_of(&m2, 2)?.clone();
    let n3 = unet_of(&m3, 3)?.clone();
    samples
        .iter()
        .map(|s| {
            let mut f = Forward::new(&mut m2.store, Mode::Eval);
            let x = f.input(s.full.clone())?;
            let y = n2.logits(&mut f, x)?;
            let logits2d = f.value(y)?.clone();
            let mut f = Forward::new(&mut m3.store, Mode::Eval);
            let x = f.input(s.low.clone())?;
            let y = n3.logits(&mut f, x)?;
            let logits3d = f.value(y)?.clone();
            Ok(CachedLogits { logits2d, logits3d })
        })
        .collect()
}

/// Stage iii: only the combiner trains, on cached sub-network logits.
pub fn train_combiner(
    ck2d: &Checkpoint<f32>,
    ck3d: &Checkpoint<f32>,
    variant: ComboVariant,
    samples: &[WindowSample],
    tc: &TrainConfig,
    lineage: Vec<String>,
) -> Result<StageOutput> {
    tc.validate()?;
    let tc = &TrainConfig {
        lr_max: tc.lr_combiner,
        ..tc.clone()
    };
    let cached = cache_logits(ck2d, ck3d, samples)?;
    let mut rng = stage_rng(tc, Stage::TrainCombiner);
    let mut store = ParamStore::new();
    let combiner = Combiner::new(&mut store, GROUP_COMBINER, variant, &mut rng)?;
    let state = StageState::new(Stage::TrainCombiner, tc.lr_max, tc.finetune_k, lineage);
    let epochs = tc.epochs_combiner;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trainer = Trainer::new(tc, state, steps(order.len(), tc.batch_windows), epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_windows) {
            let img = cat_batch(&chunk.iter().map(|&i| &samples[i].full).collect::<Vec<_>>())?;
            let l2 = cat_batch(&chunk.iter().map(|&i| &cached[i].logits2d).collect::<Vec<_>>())?;
            let l3 = cat_batch(&chunk.iter().map(|&i| &cached[i].logits3d).collect::<Vec<_>>())?;
            let t = cat_batch(&chunk.iter().map(|&i| &samples[i].full_target).collect::<Vec<_>>())?;
            trainer.step(&mut store, &t, |f| {
                let (img, l2, l3) = (f.input(img)?, f.input(l2)?, f.input(l3)?);
                combiner.forward(f, img, l2, l3)
            })?;
        }
    }
    let arch = ModelArch::Combiner {
        prefix: GROUP_COMBINER.into(),
        variant,
    };
    Ok(trainer.finish(arch, store, epochs))
}

/// Stage iv: join the three trained parts into one model. No training.
pub fn assemble(
    ck2d: &Checkpoint<f32>,
    ck3d: &Checkpoint<f32>,
    ckc: &Checkpoint<f32>,
    lineage: Vec<String>,
) -> Result<Checkpoint<f32>> {
    let config_of = |ck: &Checkpoint<f32>, dims: usize| match &ck.arch {
        ModelArch::Unet { config, .. } if config.dims == dims => Ok(config.clone()),
        _ => Err(Error::Config(format!("expected a {dims}D UNet checkpoint"))),
    };
    let variant = match &ckc.arch {
        ModelArch::Combiner { variant, .. } => *variant,
        _ => return Err(Error::Config("expected a combiner checkpoint".into())),
    };
    let config = ComboNetConfig {
        unet2d: config_of(ck2d, 2)?,
        unet3d: config_of(ck3d, 3)?,
        variant,
    };
    let mut store = ParamStore::new();
    ComboNet::new(&mut store, config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut copied = 0;
    for ck in [ck2d, ck3d, ckc] {
        copied += store.load_matching(&ck.store)?;
    }
    if copied != store.len() {
        return Err(Error::InvalidArgument(format!(
            "assembled model has {} tensors but the checkpoints supplied {copied}",
            store.len()
        )));
    }
    Ok(Checkpoint::new(ModelArch::Combonet { config }, Stage::Assemble.name(), lineage, store))
}

/// Stage v: end-to-end training of an assembled model. Groups whose rate is
/// zero (e.g. `finetune_k = inf`) stay frozen.
pub fn finetune(ck: &Checkpoint<f32>, samples: &[WindowSample], tc: &TrainConfig, lineage: Vec<String>) -> Result<StageOutput> {
    tc.validate()?;
    let mut loaded = LoadedModel::from_checkpoint(ck)?;
    let net = match &loaded.model {
        Model::ComboNet(net) => net.clone(),
        _ => return Err(Error::Config("fine-tuning needs an assembled ComboNet checkpoint".into())),
    };
    let mut rng = stage_rng(tc, Stage::Finetune);
    let state = StageState::new(Stage::Finetune, tc.lr_max, tc.finetune_k, lineage);
    let epochs = tc.epochs_finetune;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trainer = Trainer::new(tc, state, steps(order.len(), tc.batch_windows), epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_windows) {
            let full = cat_batch(&chunk.iter().map(|&i| &samples[i].full).collect::<Vec<_>>())?;
            let low = cat_batch(&chunk.iter().map(|&i| &samples[i].low).collect::<Vec<_>>())?;
            let t = cat_batch(&chunk.iter().map(|&i| &samples[i].full_target).collect::<Vec<_>>())?;
            trainer.step(&mut loaded.store, &t, |f| {
                let (a, b) = (f.input(full)?, f.input(low)?);
                net.forward(f, a, b)
            })?;
        }
    }
    let arch = ck.arch.clone();
    Ok(trainer.finish(arch, loaded.store, epochs))
}
