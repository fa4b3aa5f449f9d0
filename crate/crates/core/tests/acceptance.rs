//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! cargo test --release --test acceptance
//!
//! Criterion 7 trains the full desk-scale pipeline and takes roughly a
//! quarter of an hour on one core.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use combonet::checkpoint::{Checkpoint, ModelArch};
use combonet::combonet::{bind_batches, flatten_3d_to_2d, stack_2d_to_3d, CombinerKind, Combiner, ComboNet, ComboNetConfig, ComboVariant};
use combonet::data::{generate_phantom, split_folds, PhantomSpec};
use combonet::experiments::{evaluate, train_pipeline, PipelineConfig};
use combonet::inference::{infer_probabilities, plan_chunks, threshold, THRESHOLD};
use combonet::model::LoadedModel;
use combonet::nn::{build_conv_block, count_params, BatchNorm, Conv, ConvBnRelu, ParamReport, ParamStore};
use combonet::tensor::{ConvGeometry, Graph, NdTensor, PoolGeometry, Var};
use combonet::training::loss::{combo_loss, dice_term, loss_value, weighted_bce, ComboLossParams, LossKind};
use combonet::unet::{derive_config, derive_scaled_config, UNet};
use common::*;
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;
/// Largest share of model coordinates allowed to go unresolved by kinks.
const MAX_KINKED: f64 = 0.05;
const LOSS_TOL: f64 = 1e-10;
const LOSS_TENSORS: usize = 1000;
/// Quoted worked value and its printed precision.
const WORKED_COMBO: f64 = -0.124331;
const WORKED_TOL: f64 = 2e-6;
const PARAM_BAND: f64 = 0.10;
/// Reference totals: 2D512, 2D256, 3D128, 2D512 + 3D128 + combiner.
const REFERENCE_TOTALS: [usize; 4] = [13_818_297, 13_811_569, 35_756_321, 49_575_473];
const REFERENCE_COMBINER_GAP: usize = 2290;
const DICE_2D_MIN: f64 = 0.85;
const DESK_PHANTOMS: usize = 16;
const DESK_EXTENTS: [usize; 3] = [40, 128, 128];
const DESK_BUDGET_S: f64 = 30.0 * 60.0;
const CHUNK_BUDGET_S: f64 = 120.0;
const GRAD_BUDGET_S: f64 = 300.0;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// `sum(y * r)` for a fixed random `r`, so every output element gets a
/// distinct weight.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).unwrap().to_vec();
    let r = random_tensor(&shape, 0.1, &mut rng(seed));
    let r = g.constant(r).unwrap();
    let m = g.mul(y, r).unwrap();
    g.sum(m).unwrap()
}

fn op_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let mut out = Vec::new();
    let same2 = ConvGeometry::same(2, 3);
    let x = random_tensor(&[2, 3, 5, 5], 0.0, &mut r);
    let w = random_tensor(&[4, 3, 3, 3], 0.0, &mut r);
    let b = random_tensor(&[4], 0.0, &mut r);
    out.push((
        "conv2d",
        check_graph_op(&[x, w, b], |g, v| {
            let y = g.conv(v[0], v[1], Some(v[2]), &same2).unwrap();
            probe(g, y, 1)
        }),
    ));
    let strided = ConvGeometry::new(vec![3, 3], vec![2, 2], vec![1, 1]).unwrap();
    let x = random_tensor(&[1, 2, 6, 6], 0.0, &mut r);
    let w = random_tensor(&[3, 2, 3, 3], 0.0, &mut r);
    out.push((
        "conv2d-stride2",
        check_graph_op(&[x, w], |g, v| {
            let y = g.conv(v[0], v[1], None, &strided).unwrap();
            probe(g, y, 2)
        }),
    ));
    let same3 = ConvGeometry::same(3, 3);
    let x = random_tensor(&[1, 2, 4, 4, 3], 0.0, &mut r);
    let w = random_tensor(&[2, 2, 3, 3, 3], 0.0, &mut r);
    let b = random_tensor(&[2], 0.0, &mut r);
    out.push((
        "conv3d",
        check_graph_op(&[x, w, b], |g, v| {
            let y = g.conv(v[0], v[1], Some(v[2]), &same3).unwrap();
            probe(g, y, 3)
        }),
    ));
    let x = random_tensor(&[2, 2, 4, 4], 0.0, &mut r);
    out.push((
        "max_pool2d",
        check_graph_op(&[x.clone()], |g, v| {
            let y = g.max_pool(v[0], &PoolGeometry::tiles(vec![2, 2])).unwrap();
            probe(g, y, 4)
        }),
    ));
    let x3 = random_tensor(&[1, 2, 4, 4, 3], 0.0, &mut r);
    out.push((
        "max_pool3d",
        check_graph_op(&[x3.clone()], |g, v| {
            let y = g.max_pool(v[0], &PoolGeometry::tiles(vec![2, 2, 1])).unwrap();
            probe(g, y, 5)
        }),
    ));
    out.push((
        "avg_pool",
        check_graph_op(&[x.clone()], |g, v| {
            let y = g.avg_pool(v[0], &[2, 2]).unwrap();
            probe(g, y, 6)
        }),
    ));
    out.push((
        "upsample",
        check_graph_op(&[x3.clone()], |g, v| {
            let y = g.upsample(v[0], &[4, 4, 1]).unwrap();
            probe(g, y, 7)
        }),
    ));
    let xb = random_tensor(&[3, 2, 4, 4], 0.0, &mut r);
    let gamma = random_tensor(&[2], 0.2, &mut r);
    let beta = random_tensor(&[2], 0.0, &mut r);
    out.push((
        "batch_norm_train",
        check_graph_op(&[xb.clone(), gamma.clone(), beta.clone()], |g, v| {
            let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
            probe(g, y, 8)
        }),
    ));
    out.push((
        "batch_norm_eval",
        check_graph_op(&[xb, gamma, beta], |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5).unwrap();
            probe(g, y, 9)
        }),
    ));
    let xr = random_tensor(&[2, 3, 4, 4], 1e-3, &mut r);
    out.push((
        "relu",
        check_graph_op(&[xr.clone()], |g, v| {
            let y = g.relu(v[0]).unwrap();
            probe(g, y, 10)
        }),
    ));
    out.push((
        "sigmoid",
        check_graph_op(&[xr.clone()], |g, v| {
            let y = g.sigmoid(v[0]).unwrap();
            probe(g, y, 11)
        }),
    ));
    let xs = random_tensor(&[2, 3, 4, 4], 0.0, &mut r);
    out.push((
        "add",
        check_graph_op(&[xr.clone(), xs.clone()], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            probe(g, y, 12)
        }),
    ));
    out.push((
        "mul",
        check_graph_op(&[xr.clone(), xs.clone()], |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            probe(g, y, 13)
        }),
    ));
    out.push((
        "scale",
        check_graph_op(&[xr.clone()], |g, v| {
            let y = g.scale(v[0], -1.7).unwrap();
            probe(g, y, 14)
        }),
    ));
    out.push((
        "reshape",
        check_graph_op(&[xr.clone()], |g, v| {
            let y = g.reshape(v[0], &[6, 16]).unwrap();
            probe(g, y, 15)
        }),
    ));
    out.push((
        "concat_channels",
        check_graph_op(&[xr.clone(), xs.clone()], |g, v| {
            let y = g.concat_channels(&[v[0], v[1]]).unwrap();
            probe(g, y, 16)
        }),
    ));
    let xd = random_tensor(&[6, 1, 4, 4], 0.0, &mut r);
    out.push((
        "stack_depth",
        check_graph_op(&[xd], |g, v| {
            let y = g.stack_depth(v[0], 3).unwrap();
            probe(g, y, 17)
        }),
    ));
    out.push((
        "flatten_depth",
        check_graph_op(&[x3], |g, v| {
            let y = g.flatten_depth(v[0]).unwrap();
            probe(g, y, 18)
        }),
    ));
    out.push((
        "sum+mean",
        check_graph_op(&[xs.clone()], |g, v| {
            let s = g.sum(v[0]).unwrap();
            let m = g.mean(v[0]).unwrap();
            let ss = g.mul(s, s).unwrap();
            g.add(ss, m).unwrap()
        }),
    ));
    let t = binary_target(&[2, 3, 4, 4], &mut r);
    out.push((
        "weighted_bce",
        check_graph_op(&[xs.clone()], |g, v| {
            let p = g.sigmoid(v[0]).unwrap();
            g.weighted_bce(p, &t, 0.85).unwrap()
        }),
    ));
    out.push((
        "dice_term",
        check_graph_op(&[xs], |g, v| {
            let p = g.sigmoid(v[0]).unwrap();
            g.dice_term(p, &t, 1.0).unwrap()
        }),
    ));
    out
}

fn model_checks() -> Vec<(String, ModelCheck)> {
    let params = ComboLossParams::default();
    let mut out = Vec::new();
    let mut r = rng(21);

    let c2 = derive_scaled_config(2, 64, None, 32).unwrap();
    let mut store = ParamStore::<f64>::new();
    let net = UNet::new(&mut store, "unet2d", c2, true, &mut r).unwrap();
    let x = NdTensor::from_fn(vec![1, 1, 64, 64], |_| r.gen_range(0.0..1.0));
    let t = binary_target(&[1, 1, 64, 64], &mut r);
    let check = check_model(&store, 2, 1, |f| {
        let xv = f.input(x.clone()).unwrap();
        let p = net.forward(f, xv).unwrap();
        combo_loss(&mut f.graph, p, &t, &params).unwrap()
    });
    out.push(("unet-2d64".to_string(), check));

    let c3 = derive_scaled_config(3, 64, Some(4), 64).unwrap();
    let mut store = ParamStore::<f64>::new();
    let net = UNet::new(&mut store, "unet3d", c3, true, &mut r).unwrap();
    let x = NdTensor::from_fn(vec![1, 1, 64, 64, 4], |_| r.gen_range(0.0..1.0));
    let t = binary_target(&[1, 1, 64, 64, 4], &mut r);
    let check = check_model(&store, 2, 2, |f| {
        let xv = f.input(x.clone()).unwrap();
        let p = net.forward(f, xv).unwrap();
        combo_loss(&mut f.graph, p, &t, &params).unwrap()
    });
    out.push(("unet-3d64x4".to_string(), check));

    for kind in [CombinerKind::TwoD, CombinerKind::ThreeD] {
        let config = ComboNetConfig::for_extent(kind, 64, 2, 32, 64).unwrap();
        let mut store = ParamStore::<f64>::new();
        let net = ComboNet::new(&mut store, config, &mut r).unwrap();
        let full = NdTensor::from_fn(vec![2, 1, 64, 64], |_| r.gen_range(0.0..1.0));
        let low = NdTensor::from_fn(vec![1, 1, 16, 16, 2], |_| r.gen_range(0.0..1.0));
        let t = binary_target(&[2, 1, 64, 64], &mut r);
        let check = check_model(&store, 2, 3, |f| {
            let a = f.input(full.clone()).unwrap();
            let b = f.input(low.clone()).unwrap();
            let p = net.forward(f, a, b).unwrap();
            combo_loss(&mut f.graph, p, &t, &params).unwrap()
        });
        out.push((format!("combonet-{}d", kind.dims()), check));
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let ops = op_checks();
    let models = model_checks();
    let elapsed = start.elapsed().as_secs_f64();
    let worst_op = ops.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let worst_model = models.iter().map(|m| m.1.error).fold(0.0, f64::max);
    let kink_ok = models
        .iter()
        .all(|(_, m)| m.kinked as f64 <= MAX_KINKED * (m.checked + m.kinked) as f64);
    let mut detail = format!(
        "{} ops, worst {} {:.2e}; models: {}; {elapsed:.0}s",
        ops.len(),
        worst_op.0,
        worst_op.1,
        models
            .iter()
            .map(|(n, m)| format!("{n} {:.2e} ({} coords, {} kinked)", m.error, m.checked, m.kinked))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let bad: Vec<_> = ops.iter().filter(|(_, e)| !(*e < GRAD_TOL)).map(|(n, e)| format!("{n}={e:.2e}")).collect();
    if !bad.is_empty() || !(worst_model < GRAD_TOL) || !kink_ok || elapsed > GRAD_BUDGET_S {
        detail.push_str(&format!("; failing ops {bad:?}"));
        return Err(detail);
    }
    Ok(detail)
}

// Straight-line scalar oracle for the loss terms.
fn oracle_wbce(p: &[f64], t: &[f64], beta: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += beta * t[i] * p[i].ln() + (1.0 - beta) * (1.0 - t[i]) * (1.0 - p[i]).ln();
    }
    -acc / p.len() as f64
}

fn oracle_dice(p: &[f64], t: &[f64], s: f64) -> f64 {
    let (mut tp, mut sum) = (0.0, 0.0);
    for i in 0..p.len() {
        tp += t[i] * p[i];
        sum += t[i] + p[i];
    }
    (tp + s) / (sum + s)
}

fn oracle_combo(p: &[f64], t: &[f64], a: f64, b: f64, s: f64) -> f64 {
    a * oracle_wbce(p, t, b) - (1.0 - a) * oracle_dice(p, t, s)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for k in 0..LOSS_TENSORS {
        let n = r.gen_range(1..=256);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(1e-3..1.0 - 1e-3)).collect();
        // binary targets for most tensors, soft targets for some
        let t: Vec<f64> = (0..n)
            .map(|_| if k % 4 == 3 { r.gen_range(0.0..1.0) } else { f64::from(u8::from(r.gen::<f64>() < 0.4)) })
            .collect();
        let (a, b, s) = (r.gen_range(0.01..0.99), r.gen_range(0.01..0.99), r.gen_range(0.01..2.0));
        let params = ComboLossParams::new(a, b, s).map_err(e2s)?;
        worst = worst
            .max(rel(weighted_bce(&p, &t, b), oracle_wbce(&p, &t, b)))
            .max(rel(dice_term(&p, &t, s), oracle_dice(&p, &t, s)))
            .max(rel(loss_value(LossKind::Combo, &p, &t, &params), oracle_combo(&p, &t, a, b, s)));
        let mut g = Graph::<f64>::new();
        let pv = g.leaf(NdTensor::new(vec![n], p.clone()).map_err(e2s)?, false).map_err(e2s)?;
        let tt = NdTensor::new(vec![n], t.clone()).map_err(e2s)?;
        let l = combo_loss(&mut g, pv, &tt, &params).map_err(e2s)?;
        worst = worst.max(rel(g.value(l).map_err(e2s)?.item().map_err(e2s)?, oracle_combo(&p, &t, a, b, s)));
    }
    ensure(worst < LOSS_TOL, || format!("max relative deviation {worst:.2e}"))?;
    let worked = loss_value(LossKind::Combo, &[0.5], &[1.0], &ComboLossParams::default());
    let closed = 0.4 * 0.85 * std::f64::consts::LN_2 - 0.6 * 0.6;
    ensure(rel(worked, closed) < LOSS_TOL && (worked - WORKED_COMBO).abs() < WORKED_TOL, || {
        format!("worked value {worked:.7} vs closed form {closed:.7} / quoted {WORKED_COMBO}")
    })?;
    let mut r = rng(3);
    for _ in 0..100 {
        let n = r.gen_range(1..64);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.gen::<bool>()))).collect();
        let (beta, smooth) = (r.gen_range(0.01..0.99), r.gen_range(0.01..2.0));
        // the endpoints are rejected by validation, so build them directly
        let one = loss_value(LossKind::Combo, &p, &t, &ComboLossParams { alpha: 1.0, beta, smooth });
        let zero = loss_value(LossKind::Combo, &p, &t, &ComboLossParams { alpha: 0.0, beta, smooth });
        let (b, s) = (beta, smooth);
        ensure(one == weighted_bce(&p, &t, b) && zero == -dice_term(&p, &t, s), || {
            "alpha degeneracy not exact".into()
        })?;
    }
    Ok(format!(
        "{LOSS_TENSORS} tensors, max rel {worst:.1e}; worked {worked:.7} (quoted {WORKED_COMBO}); alpha=1/0 exact"
    ))
}

fn criterion_3() -> Outcome {
    let mut rows = Vec::new();
    for (in_plane, blocks, fs) in [(512, 6, 8.0), (256, 5, 4.0), (128, 4, 2.0)] {
        let c = derive_config(2, in_plane, None).map_err(e2s)?;
        let central = c.central_shape();
        ensure(
            c.blocks == blocks && c.feature_scale() == fs && central.spatial == vec![8, 8] && central.channels == 256,
            || format!("{in_plane}: blocks {} fs {} central {central}", c.blocks, c.feature_scale()),
        )?;
        rows.push(format!("{in_plane}->B={blocks},fs={fs},{central}"));
    }
    let c = derive_config(2, 512, None).map_err(e2s)?;
    let last = c.blocks - 1;
    let skip = (c.resolution(last), c.channel_ladder[last]);
    ensure(skip == (16, 256), || format!("smallest skip {skip:?}"))?;
    Ok(format!("{}; smallest skip 16x16x256", rows.join(" ")))
}

fn criterion_4() -> Outcome {
    let x = NdTensor::<f32>::from_fn(vec![4, 1, 512, 512, 20], |i| (i as f32).sin() * 1e3);
    let flat = flatten_3d_to_2d(&x).map_err(e2s)?;
    ensure(flat.shape() == [80, 1, 512, 512], || format!("flattened shape {:?}", flat.shape()))?;
    let back = stack_2d_to_3d(&flat, 20).map_err(e2s)?;
    let same = back.shape() == x.shape() && back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "round trip not bitwise".into())?;
    let b = bind_batches(4, 20).map_err(e2s)?;
    ensure(b.batch2d == 80, || format!("batch2d {}", b.batch2d))?;
    Ok("(4,1,512,512,20) <-> (80,1,512,512) bitwise; bind(4,20)=80".into())
}

fn total(build: impl FnOnce(&mut ParamStore<f32>)) -> ParamReport {
    let mut s = ParamStore::new();
    build(&mut s);
    count_params(&s)
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let g2 = ConvGeometry::same(2, 3);
    let g3 = ConvGeometry::same(3, 3);
    let toys: [(&str, usize, ParamReport); 6] = [
        ("conv2d 3->5", 5 * 3 * 9 + 5, total(|s| drop(Conv::new(s, "c", 3, 5, g2.clone(), &mut r)))),
        ("conv3d 2->4", 4 * 2 * 27 + 4, total(|s| drop(Conv::new(s, "c", 2, 4, g3.clone(), &mut r)))),
        ("batchnorm 7", 2 * 7, total(|s| drop(BatchNorm::new(s, "b", 7)))),
        (
            "conv-bn-relu 3->5",
            5 * 3 * 9 + 5 + 2 * 5,
            total(|s| drop(ConvBnRelu::new(s, "l", 3, 5, g2.clone(), &mut r))),
        ),
        (
            "block 1->8 x3",
            (8 * 9 + 8 + 16) + 2 * (8 * 8 * 9 + 8 + 16),
            total(|s| drop(build_conv_block(s, "blk", 2, 1, 8, 3, &mut r))),
        ),
        (
            "combiner-2d",
            (16 * 2 * 9 + 16 + 32) + (16 * 9 + 1),
            total(|s| drop(Combiner::new(s, "k", ComboVariant::new(CombinerKind::TwoD), &mut r))),
        ),
    ];
    for (name, want, got) in &toys {
        ensure(got.total == *want, || format!("{name}: counted {} expected {want}", got.total))?;
    }

    let unet = |dims, in_plane| {
        total(|s| {
            let c = derive_config(dims, in_plane, Some(20)).unwrap();
            UNet::new(s, "net", c, true, &mut rng(0)).unwrap();
        })
    };
    let (r512, r256, r3) = (unet(2, 512), unet(2, 256), unet(3, 128));
    let combiner = |kind| total(|s| drop(Combiner::new(s, "combiner", ComboVariant::new(kind), &mut rng(0)))).total;
    let (k2, k3) = (combiner(CombinerKind::TwoD), combiner(CombinerKind::ThreeD));
    let combo = r512.total + r3.total + k2;
    let ours = [r512.total, r256.total, r3.total, combo];
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).map_err(e2s)?;
    let breakdown = format!(
        "# 2D512\n{}\n# 2D256\n{}\n# 3D128\n{}",
        r512.to_table(),
        r256.to_table(),
        r3.to_table()
    );
    std::fs::write(dir.join("param_breakdown.txt"), breakdown).map_err(e2s)?;
    let mut report = Vec::new();
    for (name, (o, reference)) in ["2D512", "2D256", "3D128", "ComboNet"].iter().zip(ours.iter().zip(REFERENCE_TOTALS)) {
        let ratio = *o as f64 / reference as f64;
        report.push(format!("{name} {o} vs {reference} ({ratio:.3})"));
        ensure((ratio - 1.0).abs() <= PARAM_BAND, || format!("{name}: {o} vs {reference}"))?;
    }

    // 2D512 is 2D256 wrapped in one outer block pair. The 256-level input
    // conv and the head are the only shared layers whose widths change.
    let by_name = |r: &ParamReport| r.layers.iter().map(|l| (l.layer.clone(), l.clone())).collect::<BTreeMap<_, _>>();
    let (m512, m256) = (by_name(&r512), by_name(&r256));
    let outer = |n: &str| [".enc512.", ".up512.", ".dec512."].iter().any(|p| n.contains(p));
    let rewired = ["net.enc256.0.conv", "net.head"];
    let outer_total: usize = m512.iter().filter(|(n, _)| outer(n)).map(|(_, l)| l.total()).sum();
    let inner512: Vec<_> = m512.iter().filter(|(n, _)| !outer(n) && !rewired.contains(&n.as_str())).collect();
    let inner256: Vec<_> = m256.iter().filter(|(n, _)| !rewired.contains(&n.as_str())).collect();
    ensure(inner512 == inner256, || "shared layers differ between 2D512 and 2D256".into())?;
    let first = |c_in: usize| 16 * c_in * 9 + 16;
    let head = |c: usize| c + 1;
    ensure(
        m512["net.enc256.0.conv"].total() == first(8)
            && m256["net.enc256.0.conv"].total() == first(1)
            && m512["net.head"].total() == head(8)
            && m256["net.head"].total() == head(16),
        || "re-wired boundary layers have unexpected sizes".into(),
    )?;
    let identity = r256.total + outer_total + (first(8) - first(1)) - (head(16) - head(8));
    ensure(identity == r512.total, || format!("identity {identity} vs {}", r512.total))?;
    Ok(format!(
        "toys exact; {}; 2D512 = 2D256 + outer pair {outer_total} + rewiring {}; combiner 3D-2D {} (reference {REFERENCE_COMBINER_GAP}); breakdown in {}",
        report.join(", "),
        (first(8) - first(1)) as i64 - (head(16) - head(8)) as i64,
        k3 - k2,
        dir.join("param_breakdown.txt").display()
    ))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let config = ComboNetConfig::for_extent(CombinerKind::TwoD, 128, 20, 8, 16).map_err(e2s)?;
    let mut store = ParamStore::<f32>::new();
    ComboNet::new(&mut store, config.clone(), &mut rng(6)).map_err(e2s)?;
    let ck = Checkpoint::new(ModelArch::Combonet { config }, "init", vec![], store);
    let mut model = LoadedModel::from_checkpoint(&ck).map_err(e2s)?;
    let mut notes = Vec::new();
    for depth in [240, 250] {
        let (image, _) = generate_phantom(&PhantomSpec {
            seed: 6,
            extents: [depth, 128, 128],
            ..PhantomSpec::default()
        })
        .map_err(e2s)?;
        let whole_plan = plan_chunks(depth, depth.div_ceil(20) * 20, 20).map_err(e2s)?;
        let chunk_plan = plan_chunks(depth, 120, 20).map_err(e2s)?;
        let whole = infer_probabilities(&mut model, &image, &whole_plan, 1).map_err(e2s)?;
        let chunked = infer_probabilities(&mut model, &image, &chunk_plan, 1).map_err(e2s)?;
        ensure(chunked.extents() == [depth, 128, 128], || format!("extents {:?}", chunked.extents()))?;
        let bitwise = whole.data().iter().zip(chunked.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let masks = threshold(&whole, THRESHOLD).data() == threshold(&chunked, THRESHOLD).data();
        ensure(bitwise && masks, || format!("{depth} slices: chunked output differs"))?;
        notes.push(format!(
            "D={depth}: {} chunks, pad {}",
            chunk_plan.chunks.len(),
            chunk_plan.chunks.last().map_or(0, |c| c.pad())
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < CHUNK_BUDGET_S, || format!("took {elapsed:.0}s"))?;
    Ok(format!("{}; bitwise equal to whole-volume inference; {elapsed:.0}s", notes.join(", ")))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let cases = phantom_cases(DESK_PHANTOMS, DESK_EXTENTS, 0);
    let pc = PipelineConfig::default();
    let split = split_folds(cases.len(), 4, pc.train.seed).map_err(e2s)?;
    let pick = |ids: Vec<usize>| ids.into_iter().map(|i| cases[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(split.rest(0)), pick(split.fold(0)));
    let models = train_pipeline(&train, &pc, &[CombinerKind::TwoD, CombinerKind::ThreeD]).map_err(e2s)?;
    let d2 = evaluate(&models.unet2d, &test, &pc).map_err(e2s)?.mean;
    let d3 = evaluate(&models.unet3d, &test, &pc).map_err(e2s)?.mean;
    let mut combo = Vec::new();
    for kind in [CombinerKind::TwoD, CombinerKind::ThreeD] {
        let ck = models.assembled(kind).ok_or("missing assembled model")?;
        combo.push(evaluate(ck, &test, &pc).map_err(e2s)?.mean);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!(
        "train {} / test {} phantoms; dice 2D {d2:.4}, 3D {d3:.4}, ComboNet-2D {:.4}, ComboNet-3D {:.4}; {:.1} min",
        train.len(),
        test.len(),
        combo[0],
        combo[1],
        elapsed / 60.0
    );
    ensure(d2 >= DICE_2D_MIN && combo.iter().all(|&c| c >= d2) && elapsed < DESK_BUDGET_S, || detail.clone())?;
    Ok(detail)
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(key, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_commands(root: &Path) -> Result<(), String> {
    let data = root.join("data/dataset.json");
    let out = root.join("runs");
    let common = |extra: &[&str]| {
        let mut v: Vec<String> = vec!["combonet".into()];
        v.extend(extra.iter().map(|s| s.to_string()));
        v.extend(
            [
                "--arch", "combonet-2d:64", "--size", "64x64x20", "--count", "4", "--seed", "3", "--epochs-2d", "1",
                "--epochs-3d", "1", "--epochs-combiner", "1", "--folds", "2", "--fold", "1",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        v.extend(["--data".into(), data.display().to_string(), "--out".into(), out.display().to_string()]);
        v
    };
    let image = root.join("data/phantom-001-image.cvol").display().to_string();
    let mask = root.join("runs/mask.cvol").display().to_string();
    let ck = root.join("runs/combonet.json").display().to_string();
    let commands: Vec<Vec<String>> = vec![
        common(&["phantom"]),
        common(&["train"]),
        common(&["train", "--stage", "finetune"]),
        common(&["infer", "--checkpoint", &ck, "--input", &image, "--output", &mask, "--overlay", "5"]),
        common(&["eval", "--checkpoint", &ck]),
        common(&["cv"]),
        common(&["ablate"]),
    ];
    for c in commands {
        combonet::cli::run_from(c.clone()).map_err(|e| format!("{}: {e}", c[1]))?;
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().map_err(e2s)?;
    let b = tempfile::tempdir().map_err(e2s)?;
    run_commands(a.path())?;
    run_commands(b.path())?;
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "runs produced different file sets".into())?;
    let differing: Vec<_> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k.clone()).collect();
    ensure(differing.is_empty(), || format!("files differ: {differing:?}"))?;
    let checkpoints = ta.keys().filter(|k| k.ends_with(".bin")).count();
    Ok(format!(
        "phantom/train/finetune/infer/eval/cv/ablate twice: {} files bit-identical ({checkpoints} checkpoint blobs)",
        ta.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", criterion_1),
        ("loss oracle equivalence", criterion_2),
        ("architecture pattern", criterion_3),
        ("plumbing exactness", criterion_4),
        ("parameter accounting", criterion_5),
        ("chunk invariance", criterion_6),
        ("desk-scale training", criterion_7),
        ("determinism", criterion_8),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(d) => println!("criterion {n}: PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
