use std::path::Path;

use combonet::combonet::{flatten_3d_to_2d, stack_2d_to_3d};
use combonet::data::{split_folds, Image, Mask, Volume};
use combonet::inference::{plan_chunks, threshold};
use combonet::tensor::{Graph, NdTensor};
use combonet::training::loss::{dice_term, weighted_bce};
use proptest::prelude::*;

fn volume_parts() -> impl Strategy<Value = ([usize; 3], Vec<f32>)> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(d, h, w)| {
        (Just([d, h, w]), prop::collection::vec(-1e3f32..1e3, d * h * w))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stack_flatten_round_trip(b in 1usize..4, d in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u32>()) {
        let x = NdTensor::<f32>::from_fn(vec![b, 1, h, w, d], |i| ((i as u32 ^ seed) as f32).sin());
        let flat = flatten_3d_to_2d(&x).unwrap();
        prop_assert_eq!(flat.shape(), &[b * d, 1, h, w][..]);
        let back = stack_2d_to_3d(&flat, d).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // slice k of volume n lands at 2D batch index n * d + k
        let (n, k) = (b - 1, d - 1);
        let src = x.data()[((n * h + h - 1) * w + w - 1) * d + k];
        let dst = flat.data()[((n * d + k) * h + h - 1) * w + w - 1];
        prop_assert_eq!(src.to_bits(), dst.to_bits());
    }

    #[test]
    fn upsample_then_average_is_identity(c in 1usize..3, h in 1usize..4, w in 1usize..4, fy in 1usize..4, fx in 1usize..4,
                                         values in prop::collection::vec(-10.0f64..10.0, 36)) {
        let x = NdTensor::new(vec![1, c, h, w], values[..c * h * w].to_vec()).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false).unwrap();
        let up = g.upsample(v, &[fy, fx]).unwrap();
        let down = g.avg_pool(up, &[fy, fx]).unwrap();
        let y = g.value(down).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..64), s in 0.01f64..2.0) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = dice_term(&p, &t, s);
        prop_assert!((a - dice_term(&t, &p, s)).abs() <= 1e-12);
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert_eq!(dice_term(&t, &t, s) <= 1.0, true);
    }

    #[test]
    fn weighted_bce_is_nonnegative(pairs in prop::collection::vec((1e-6f64..1.0 - 1e-6, 0.0f64..=1.0), 1..64), beta in 0.01f64..0.99) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(weighted_bce(&p, &t, beta) >= 0.0);
    }

    #[test]
    fn threshold_is_monotone((extents, data) in volume_parts(), lo in 0.0f32..1.0, hi in 0.0f32..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let probs: Image = Volume::new(extents, [1.0; 3], data.iter().map(|v| (v / 1e3 + 1.0) / 2.0).collect()).unwrap();
        let a = threshold(&probs, lo);
        let b = threshold(&probs, hi);
        prop_assert_eq!(a.extents(), extents);
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x >= y));
    }

    #[test]
    fn chunk_plans_tile_the_volume(depth in 1usize..400, window in 1usize..32, extra in 0usize..200) {
        let max = window + extra;
        let plan = plan_chunks(depth, max, window).unwrap();
        let mut next = 0;
        for (i, c) in plan.chunks.iter().enumerate() {
            prop_assert_eq!(c.start, next);
            prop_assert!(c.real > 0 && c.real <= max);
            prop_assert_eq!(c.padded % window, 0);
            prop_assert!(c.pad() < window);
            if i + 1 < plan.chunks.len() {
                prop_assert_eq!(c.pad(), 0);
            }
            next += c.real;
        }
        prop_assert_eq!(next, depth);
    }

    #[test]
    fn folds_partition_indices(count in 1usize..80, k in 1usize..10, seed in any::<u64>()) {
        prop_assume!(k <= count);
        let split = split_folds(count, k, seed).unwrap();
        let mut seen = vec![0usize; count];
        for f in 0..k {
            let fold = split.fold(f);
            let rest = split.rest(f);
            prop_assert_eq!(fold.len() + rest.len(), count);
            for i in fold {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        let sizes = split.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(split_folds(count, k, seed).unwrap(), split);
    }

    #[test]
    fn cvol_round_trip((extents, data) in volume_parts(), sy in 0.1f64..5.0) {
        let image: Image = Volume::new(extents, [2.5, sy, sy], data.clone()).unwrap();
        let back = Image::from_bytes(&image.to_bytes().unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.extents(), extents);
        prop_assert_eq!(back.spacing_mm(), image.spacing_mm());
        prop_assert!(back.data().iter().zip(image.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mask: Mask = Volume::new(extents, [1.0; 3], data.iter().map(|&v| u8::from(v > 0.0)).collect()).unwrap();
        let back = Mask::from_bytes(&mask.to_bytes().unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.data(), mask.data());
    }
}

#[test]
fn corrupt_cvol_is_rejected() {
    let image: Image = Volume::new([2, 2, 2], [1.0; 3], vec![0.5; 8]).unwrap();
    let bytes = image.to_bytes().unwrap();
    assert!(Image::from_bytes(&bytes[..bytes.len() - 1], Path::new("short")).is_err());
    assert!(Mask::from_bytes(&bytes, Path::new("wrong-type")).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Image::from_bytes(&bad, Path::new("magic")).is_err());
}
