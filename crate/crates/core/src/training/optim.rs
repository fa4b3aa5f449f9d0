use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter state indexed by parameter id.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    /// Apply one update. `rate` maps a parameter group name to its learning
    /// rate for this step. Every gradient is checked before anything moves.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, rate: impl Fn(&str) -> f64) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: store.entry(*id).name.clone(),
                });
            }
        }
        self.steps += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        for (id, g) in grads {
            let lr = T::of(rate(store.entry(*id).group()));
            let i = id.index();
            let n = g.numel();
            match self.config {
                OptimizerConfig::Sgd { momentum } => {
                    let w = store.value_mut(*id).data_mut();
                    if momentum == 0.0 {
                        for (w, &g) in w.iter_mut().zip(g.data()) {
                            *w = *w - lr * g;
                        }
                    } else {
                        let mu = T::of(momentum);
                        let vel = self.first[i].get_or_insert_with(|| vec![T::zero(); n]);
                        for ((w, v), &g) in w.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                            *v = mu * *v + g;
                            *w = *w - lr * *v;
                        }
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::one() - T::of(beta1.powi(self.steps as i32));
                    let c2 = T::one() - T::of(beta2.powi(self.steps as i32));
                    let m = self.first[i].get_or_insert_with(|| vec![T::zero(); n]);
                    let v = self.second[i].get_or_insert_with(|| vec![T::zero(); n]);
                    let w = store.value_mut(*id).data_mut();
                    for k in 0..n {
                        let gk = g.data()[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * gk;
                        v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        w[k] = w[k] - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamId, ParamKind};
    use crate::tensor::NdTensor;

    fn one_param(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("g.w", ParamKind::Weight, NdTensor::full(vec![1], v));
        (s, id)
    }

    #[test]
    fn sgd_step() {
        let (mut s, id) = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { momentum: 0.0 });
        opt.step(&mut s, &vec![(id, NdTensor::full(vec![1], 2.0))], |_| 0.1).unwrap();
        assert!((s.value(id).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        let (mut s, id) = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.step(&mut s, &vec![(id, NdTensor::full(vec![1], 3.0))], |_| 0.01).unwrap();
        assert!((s.value(id).data()[0] - 0.99).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_and_zero_rate_leave_parameters() {
        for cfg in [OptimizerConfig::Sgd { momentum: 0.9 }, OptimizerConfig::default()] {
            let (mut s, id) = one_param(0.3);
            let mut opt = Optimizer::new(cfg);
            opt.step(&mut s, &vec![(id, NdTensor::zeros(vec![1]))], |_| 0.1).unwrap();
            assert_eq!(s.value(id).data()[0], 0.3);
            opt.step(&mut s, &vec![(id, NdTensor::full(vec![1], 5.0))], |_| 0.0).unwrap();
            assert_eq!(s.value(id).data()[0], 0.3);
        }
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let (mut s, id) = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let err = opt
            .step(&mut s, &vec![(id, NdTensor::full(vec![1], f64::NAN))], |_| 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "g.w.weight"));
        assert_eq!(s.value(id).data()[0], 1.0);
    }
}
