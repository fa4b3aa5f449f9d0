#![allow(dead_code)]

use combonet::data::{generate_phantom, PhantomSpec};
use combonet::experiments::Case;
use combonet::nn::{Forward, Mode, ParamId, ParamStore};
use combonet::tensor::{Graph, NdTensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
/// Relative-error denominators never drop below this fraction of the
/// largest gradient magnitude in the same check.
pub const SCALE_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero, so ReLU
/// kinks are not straddled by the finite-difference step.
pub fn random_tensor(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> NdTensor<f64> {
    NdTensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen::<bool>() {
            v
        } else {
            -v
        }
    })
}

pub fn binary_target(shape: &[usize], rng: &mut ChaCha8Rng) -> NdTensor<f64> {
    NdTensor::from_fn(shape.to_vec(), |_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 })
}

/// Pairs of (analytic, numeric) derivatives.
pub fn max_relative_error(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(0f64, |m, &(a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (SCALE_FLOOR * scale).max(f64::MIN_POSITIVE);
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Gradient check of a scalar function of graph leaves. `build` receives
/// the leaf vars and returns the loss var.
pub fn check_graph_op(inputs: &[NdTensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |values: &[NdTensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.leaf(v.clone(), false).unwrap()).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).unwrap().item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone(), true).unwrap()).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut pairs = Vec::new();
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            pairs.push((a, (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS)));
        }
    }
    max_relative_error(&pairs)
}

/// Result of a model gradient check.
#[derive(Debug, Clone, Copy)]
pub struct ModelCheck {
    pub error: f64,
    pub checked: usize,
    /// Coordinates where every step size straddled a ReLU or max-pool switch.
    pub kinked: usize,
}

/// Step sizes tried in turn for a model coordinate, largest first so
/// roundoff stays small wherever the stencil is smooth.
pub const MODEL_STEPS: [f64; 3] = [1e-6, 2.5e-7, 6e-8];
/// Agreement (relative) required between the stencils at `h` and `2h`
/// before a coordinate counts as free of switch points.
pub const KINK_TOL: f64 = 2e-5;
/// Roundoff of one full forward pass, in ulps of the loss. Added to the
/// stencil tolerance so that noise is not mistaken for a switch point.
pub const LOSS_ULPS: f64 = 1000.0;

/// Gradient check of a model loss with respect to `per_tensor` seeded
/// coordinates of every trainable parameter tensor.
///
/// Full-size models have so many ReLU and max-pool switch points that a
/// fixed step regularly straddles one. Each coordinate is therefore probed
/// at `h` and `2h`. A switch point inside the stencil makes either the
/// central differences or the one-sided slope gaps disagree; the step is
/// then shrunk, and a coordinate that never settles is counted as kinked
/// instead of compared.
pub fn check_model(
    store: &ParamStore<f64>,
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&mut Forward<'_, f64>) -> Var,
) -> ModelCheck {
    let eval = |s: &ParamStore<f64>| {
        let mut s = s.clone();
        let mut f = Forward::new(&mut s, Mode::Train);
        let l = loss(&mut f);
        f.value(l).unwrap().item().unwrap()
    };
    let mut work = store.clone();
    let mut f = Forward::new(&mut work, Mode::Train);
    let l = loss(&mut f);
    let grads = f.backward(l).unwrap();
    let scale = grads.iter().flat_map(|(_, g)| g.data().iter()).fold(0f64, |m, v| m.max(v.abs()));
    let floor = (SCALE_FLOOR * scale).max(f64::MIN_POSITIVE);
    let f0 = eval(store);
    let noise = LOSS_ULPS * f64::EPSILON * f0.abs();
    let mut rng = rng(seed);
    let mut pairs = Vec::new();
    let mut kinked = 0;
    for (id, g) in &grads {
        let n = g.numel();
        for _ in 0..per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let at = |d: f64| {
                let mut s = store.clone();
                s.value_mut(*id).data_mut()[i] += d;
                eval(&s)
            };
            let settled = MODEL_STEPS.iter().find_map(|&h| {
                let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
                let c1 = (p1 - m1) / (2.0 * h);
                let c2 = (p2 - m2) / (4.0 * h);
                // one-sided slope gaps; smooth curvature doubles with the step
                let s1 = (p1 - 2.0 * f0 + m1) / h;
                let s2 = (p2 - 2.0 * f0 + m2) / (2.0 * h);
                let tol = KINK_TOL * c1.abs().max(floor) + noise / h;
                ((c1 - c2).abs() <= tol && (s2 - 2.0 * s1).abs() <= tol).then_some(c1)
            });
            match settled {
                Some(num) => pairs.push((g.data()[i], num)),
                None => kinked += 1,
            }
        }
    }
    ModelCheck {
        error: max_relative_error(&pairs),
        checked: pairs.len(),
        kinked,
    }
}

pub fn trainable_ids(store: &ParamStore<f64>) -> Vec<ParamId> {
    store.iter().filter(|(_, e)| e.kind.trainable()).map(|(id, _)| id).collect()
}

pub fn phantom_cases(count: usize, extents: [usize; 3], base_seed: u64) -> Vec<Case> {
    (0..count)
        .map(|i| {
            let seed = base_seed + i as u64;
            let (image, mask) = generate_phantom(&PhantomSpec {
                seed,
                extents,
                ..PhantomSpec::default()
            })
            .unwrap();
            Case {
                id: format!("phantom-{i:03}"),
                image,
                mask,
            }
        })
        .collect()
}
