//! Rebuilding models from checkpoints and running them on one depth window.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ModelArch};
use crate::combonet::{flatten_3d_to_2d, ComboNet, Combiner, AXIAL_FACTOR};
use crate::error::{Error, Result};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::{upsample_nearest, NdTensor};
use crate::unet::UNet;

#[derive(Clone, Debug)]
pub enum Model {
    UNet(UNet),
    Combiner(Combiner),
    ComboNet(ComboNet),
}

/// A model together with its parameters.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl LoadedModel {
    /// Build the architecture described by `arch` and copy in `params`.
    /// Every model tensor must be present in `params`.
    pub fn build(arch: &ModelArch, params: &ParamStore<f32>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = match arch {
            ModelArch::Unet {
                prefix,
                config,
                with_sigmoid,
            } => Model::UNet(UNet::new(&mut store, prefix, config.clone(), *with_sigmoid, &mut rng)?),
            ModelArch::Combiner { prefix, variant } => Model::Combiner(Combiner::new(&mut store, prefix, *variant, &mut rng)?),
            ModelArch::Combonet { config } => Model::ComboNet(ComboNet::new(&mut store, config.clone(), &mut rng)?),
        };
        let copied = store.load_matching(params)?;
        if copied != store.len() {
            let missing: Vec<&str> = store
                .entries()
                .iter()
                .filter(|e| params.find(&e.name).is_none())
                .map(|e| e.name.as_str())
                .take(3)
                .collect();
            return Err(Error::InvalidArgument(format!(
                "parameters missing from checkpoint ({} of {}), e.g. {:?}",
                store.len() - copied,
                store.len(),
                missing
            )));
        }
        Ok(Self { model, store })
    }

    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        Self::build(&ck.arch, &ck.store)
    }

    /// Foreground probabilities `(D, 1, H, W)` for one window given its
    /// full-resolution slices `(D, 1, H, W)` and subsampled volume
    /// `(1, 1, H/4, W/4, D)`. Batch-norm layers use running statistics.
    pub fn predict_window(&mut self, full: &NdTensor<f32>, low: &NdTensor<f32>) -> Result<NdTensor<f32>> {
        let mut f = Forward::new(&mut self.store, Mode::Eval);
        match &self.model {
            Model::UNet(net) if net.config.dims == 2 => {
                let x = f.input(full.clone())?;
                let y = net.logits(&mut f, x)?;
                let p = f.graph.sigmoid(y)?;
                Ok(f.value(p)?.clone())
            }
            Model::UNet(net) => {
                let x = f.input(low.clone())?;
                let y = net.logits(&mut f, x)?;
                let p = f.graph.sigmoid(y)?;
                let up = upsample_nearest(f.value(p)?, &[AXIAL_FACTOR, AXIAL_FACTOR, 1])?;
                flatten_3d_to_2d(&up)
            }
            Model::ComboNet(net) => {
                let a = f.input(full.clone())?;
                let b = f.input(low.clone())?;
                let p = net.forward(&mut f, a, b)?;
                Ok(f.value(p)?.clone())
            }
            Model::Combiner(_) => Err(Error::InvalidArgument(
                "a combiner checkpoint needs its sub-networks; assemble it first".into(),
            )),
        }
    }
}
