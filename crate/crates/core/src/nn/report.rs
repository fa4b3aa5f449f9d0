use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamStore};
use crate::tensor::Element;

/// Trainable parameter counts of one layer, split by role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: String,
    pub weights: usize,
    pub biases: usize,
    pub bn_affine: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.bn_affine
    }
}

/// Which terms a total includes. The default counts everything trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountBasis {
    pub biases: bool,
    pub bn_affine: bool,
}

impl Default for CountBasis {
    fn default() -> Self {
        Self {
            biases: true,
            bn_affine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub layers: Vec<LayerCount>,
    pub total: usize,
}

/// Count trainable parameters (conv weights, conv biases, batch-norm gamma and
/// beta). Running statistics are excluded.
pub fn count_params<T: Element>(store: &ParamStore<T>) -> ParamReport {
    let mut layers: Vec<LayerCount> = Vec::new();
    for (_, e) in store.iter() {
        if !e.kind.trainable() {
            continue;
        }
        let layer = e.layer().to_string();
        let idx = match layers.iter().position(|l| l.layer == layer) {
            Some(i) => i,
            None => {
                layers.push(LayerCount {
                    layer,
                    weights: 0,
                    biases: 0,
                    bn_affine: 0,
                });
                layers.len() - 1
            }
        };
        let n = e.value.numel();
        match e.kind {
            ParamKind::Weight => layers[idx].weights += n,
            ParamKind::Bias => layers[idx].biases += n,
            ParamKind::Gamma | ParamKind::Beta => layers[idx].bn_affine += n,
            ParamKind::RunningMean | ParamKind::RunningVar => {}
        }
    }
    let total = layers.iter().map(LayerCount::total).sum();
    ParamReport { layers, total }
}

impl ParamReport {
    pub fn total_with(&self, basis: CountBasis) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights + if basis.biases { l.biases } else { 0 } + if basis.bn_affine { l.bn_affine } else { 0 }
            })
            .sum()
    }

    /// Total restricted to layers under a name prefix (e.g. `unet2d`).
    pub fn total_of(&self, prefix: &str) -> usize {
        self.layers
            .iter()
            .filter(|l| l.layer == prefix || l.layer.starts_with(&format!("{prefix}.")))
            .map(LayerCount::total)
            .sum()
    }

    /// Disjoint composition: layer lists are concatenated.
    pub fn merge(mut self, other: ParamReport) -> ParamReport {
        self.total += other.total;
        self.layers.extend(other.layers);
        self
    }

    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.layer.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>8}  {:>9}  {:>12}",
            "layer", "weights", "biases", "bn_affine", "total"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12}  {:>8}  {:>9}  {:>12}",
                l.layer,
                l.weights,
                l.biases,
                l.bn_affine,
                l.total()
            );
        }
        let basis = |b, a| self.total_with(CountBasis { biases: b, bn_affine: a });
        let _ = writeln!(out, "total (weights+biases+bn_affine): {}", self.total);
        let _ = writeln!(out, "total (weights+biases):           {}", basis(true, false));
        let _ = writeln!(out, "total (weights+bn_affine):        {}", basis(false, true));
        let _ = writeln!(out, "total (weights only):             {}", basis(false, false));
        out
    }

    /// `key=value` lines, one per layer plus totals.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let _ = writeln!(out, "{}={}", l.layer, l.total());
        }
        let _ = writeln!(out, "total={}", self.total);
        let _ = writeln!(
            out,
            "total_without_bias={}",
            self.total_with(CountBasis {
                biases: false,
                bn_affine: true
            })
        );
        let _ = writeln!(
            out,
            "total_without_bn_affine={}",
            self.total_with(CountBasis {
                biases: true,
                bn_affine: false
            })
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm, Conv};
    use crate::tensor::ConvGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_conv_and_batch_norm() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Conv::new(&mut store, "c", 1, 8, ConvGeometry::same(2, 3), &mut rng).unwrap();
        assert_eq!(count_params(&store).total, 80);
        BatchNorm::new(&mut store, "bn", 8);
        let r = count_params(&store);
        assert_eq!(r.total, 96);
        assert_eq!(r.total_with(CountBasis { biases: false, bn_affine: false }), 72);
        assert!(r.to_key_values().contains("total=96"));
        assert!(r.to_table().contains("weights only"));
    }
}
