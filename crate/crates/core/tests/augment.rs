mod common;

use common::{coordinate_grid_mismatches, strictly_one_hot};
use proptest::prelude::*;
use rand::SeedableRng;
use rescrnet::augment::{
    apply_affine, apply_affine_with, epoch_stream, sample_params, AugmentParams, AugmentRanges, Interpolation,
};
use rescrnet::palette::one_hot;
use rescrnet::{synthetic, Rng, Scalar, Tensor};

fn unique_class_mask(h: usize, w: usize) -> Tensor {
    let classes: Vec<usize> = (0..h * w).collect();
    one_hot(&classes, h, w, h * w).unwrap()
}

#[test]
fn flip_h_example() {
    let img = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mask = one_hot(&[0, 1, 1, 0], 2, 2, 2).unwrap();
    let p = AugmentParams { flip_h: true, ..AugmentParams::identity() };
    let (out, m) = apply_affine(&img, &mask, &p).unwrap();
    assert_eq!(out.data(), &[2.0, 1.0, 4.0, 3.0]);
    assert_eq!(m, one_hot(&[1, 0, 0, 1], 2, 2, 2).unwrap());
}

#[test]
fn rotation_mean_is_centred() {
    let ranges = AugmentRanges::default();
    let mut rng = Rng::seed_from_u64(2024);
    let n = 10_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let p = sample_params(&ranges, &mut rng).unwrap();
        assert!((-30.0..=30.0).contains(&p.rotation_deg));
        assert!((0.8..=1.25).contains(&p.scale));
        sum += p.rotation_deg;
    }
    assert!((sum / n as f64).abs() < 1.0);
}

#[test]
fn sampling_is_seeded_and_pins_points() {
    let ranges = AugmentRanges::default();
    let a = sample_params(&ranges, &mut Rng::seed_from_u64(5)).unwrap();
    let b = sample_params(&ranges, &mut Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    let pinned = AugmentRanges {
        rotation_deg: [12.5, 12.5],
        scale: [1.1, 1.1],
        flip_h_prob: 1.0,
        ..AugmentRanges::identity()
    };
    let p = sample_params(&pinned, &mut Rng::seed_from_u64(0)).unwrap();
    assert_eq!((p.rotation_deg, p.scale, p.flip_h, p.flip_v), (12.5, 1.1, true, false));
    let inverted = AugmentRanges { shear_deg: [3.0, -3.0], ..AugmentRanges::default() };
    assert!(sample_params(&inverted, &mut Rng::seed_from_u64(0)).is_err());
}

#[test]
fn eight_pairs_fifteen_steps() {
    let pairs: Vec<(Tensor, Tensor)> = (0..8)
        .map(|i| {
            let (img, classes) = synthetic::generate(i);
            (img, one_hot(&classes, synthetic::ROWS, synthetic::COLS, 3).unwrap())
        })
        .collect();
    let batches: Vec<_> = epoch_stream(&pairs, 15, &AugmentRanges::default(), 1, 0)
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(batches.len(), 15);
    assert!(batches.iter().all(|b| b.len() == 8));
    let total: usize = batches.iter().map(Vec::len).sum();
    assert_eq!(total, 120);
    for b in &batches {
        for (i, p) in b.iter().enumerate() {
            assert_eq!(p.source, i);
            assert!(strictly_one_hot(&p.mask));
        }
    }

    let again: Vec<_> = epoch_stream(&pairs, 15, &AugmentRanges::default(), 1, 0)
        .unwrap()
        .sequential()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(batches, again);

    let identity: Vec<_> = epoch_stream(&pairs, 1, &AugmentRanges::identity(), 1, 0)
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(identity.len(), 1);
    for (p, (img, mask)) in identity[0].iter().zip(&pairs) {
        assert_eq!((&p.image, &p.mask), (img, mask));
    }
}

#[test]
fn coordinate_grid_agrees_on_unique_classes() {
    let mask = unique_class_mask(9, 11);
    let mut rng = Rng::seed_from_u64(77);
    for _ in 0..50 {
        let p = sample_params(&AugmentRanges::default(), &mut rng).unwrap();
        assert_eq!(coordinate_grid_mismatches(&mask, &p).unwrap(), 0, "{p:?}");
    }
}

#[test]
fn rotate_90_is_transpose_then_flip() {
    let n = 7;
    let img = Tensor::from_fn(&[n, n, 1], |i| i as Scalar);
    let mask = unique_class_mask(n, n);
    let p = AugmentParams { rotation_deg: 90.0, ..AugmentParams::identity() };
    let (rot, rot_mask) = apply_affine_with(&img, &mask, &p, Interpolation::Nearest).unwrap();
    let expect = Tensor::from_fn(&[n, n, 1], |i| {
        let (r, c) = (i / n, i % n);
        // transpose: (r, c) <- (c, r); then horizontal flip: c -> n-1-c.
        img.get(&[n - 1 - c, r, 0])
    });
    assert_eq!(rot.max_abs_diff(&expect), 0.0);
    let classes = rescrnet::palette::class_indices(&rot_mask);
    let expect: Vec<usize> = expect.data().iter().map(|&v| v as usize).collect();
    assert_eq!(classes, expect);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masks_stay_one_hot_and_dims_hold(seed in 0u64..10_000, h in 2usize..14, w in 2usize..14) {
        let classes: Vec<usize> = (0..h * w).map(|i| (i * 31 + seed as usize) % 4).collect();
        let mask = one_hot(&classes, h, w, 4).unwrap();
        let img = Tensor::from_fn(&[h, w, 3], |i| (i as Scalar * 0.1).sin().abs());
        let p = sample_params(&AugmentRanges::default(), &mut Rng::seed_from_u64(seed)).unwrap();
        let (out, m) = apply_affine(&img, &mask, &p).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert_eq!(m.shape(), mask.shape());
        prop_assert!(strictly_one_hot(&m));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_is_bit_exact(seed in 0u64..1000, h in 1usize..10, w in 1usize..10) {
        let img = Tensor::from_fn(&[h, w, 2], |i| ((i as u64 * 2654435761 + seed) % 997) as Scalar / 997.0);
        let classes: Vec<usize> = (0..h * w).map(|i| (i + seed as usize) % 3).collect();
        let mask = one_hot(&classes, h, w, 3).unwrap();
        let (a, b) = apply_affine(&img, &mask, &AugmentParams::identity()).unwrap();
        prop_assert_eq!(a, img);
        prop_assert_eq!(b, mask);
    }
}
