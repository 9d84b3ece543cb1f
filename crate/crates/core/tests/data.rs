use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use rsfnet::data::io::{read_gray, read_split, write_gray_png};
use rsfnet::data::{augment, load_dataset, make_synthetic_dataset, save_dataset, AugmentPolicy, LabelMap, SceneMode, Transform};
use rsfnet::eval::{macc_miou, ConfusionMatrix};
use rsfnet::Tensor;

fn mean_std(t: &Tensor) -> (f64, f64) {
    let v = t.values();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

#[test]
fn empty_split_loads_no_samples() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("val.txt"), "\n\n").unwrap();
    assert!(load_dataset(dir.path(), "val").unwrap().is_empty());
}

#[test]
fn saved_samples_load_with_their_shapes() {
    let dir = TempDir::new().unwrap();
    let samples = make_synthetic_dataset(2, 3, SceneMode::Mixed).unwrap();
    save_dataset(dir.path(), "train", &samples).unwrap();
    let loaded = load_dataset(dir.path(), "train").unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(read_split(dir.path(), "train").unwrap().len(), 2);
    for (a, b) in loaded.iter().zip(&samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.rgb.shape(), &[3, 64, 64]);
        assert_eq!(a.thm.shape(), &[1, 64, 64]);
        assert_eq!(a.gt, b.gt);
        assert!(a.rgb.max_abs_diff(&b.rgb).unwrap() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn png_levels_scale_to_unit_range() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("g.png");
    write_gray_png(&path, 1, 3, vec![0, 51, 255]).unwrap();
    let g = read_gray(&path).unwrap();
    assert_eq!(g.dtype(), rsfnet::DType::F32);
    assert_eq!(g.values(), &[0.0, (51.0f32 / 255.0) as f64, 1.0]);
}

#[test]
fn identity_transform_keeps_the_sample() {
    let s = &make_synthetic_dataset(1, 4, SceneMode::Day).unwrap()[0];
    let t = Transform::identity(64, 64).apply(s).unwrap();
    assert_eq!(t.rgb.values(), s.rgb.values());
    assert_eq!(t.thm.values(), s.thm.values());
    assert_eq!(t.gt, s.gt);
}

#[test]
fn flipping_twice_restores_the_sample() {
    let s = &make_synthetic_dataset(1, 5, SceneMode::Night).unwrap()[0];
    let flip = Transform::new(64, 64, true, (0, 0), (64, 64), 0.0).unwrap();
    let once = flip.apply(s).unwrap();
    assert_ne!(once.gt, s.gt);
    let twice = flip.apply(&once).unwrap();
    assert_eq!(twice.rgb.values(), s.rgb.values());
    assert_eq!(twice.gt, s.gt);
}

#[test]
fn augmentation_is_seeded() {
    let s = &make_synthetic_dataset(1, 6, SceneMode::Day).unwrap()[0];
    let policy = AugmentPolicy {
        flip_prob: 0.5,
        crop: Some((48, 40)),
        max_rotation_deg: 10.0,
    };
    let a = augment(s, &mut ChaCha8Rng::seed_from_u64(9), &policy).unwrap();
    let b = augment(s, &mut ChaCha8Rng::seed_from_u64(9), &policy).unwrap();
    assert_eq!(a.rgb.shape(), &[3, 48, 40]);
    assert_eq!(a.rgb.values(), b.rgb.values());
    assert_eq!(a.gt, b.gt);
}

#[test]
fn synthetic_day_and_night_differ_in_rgb_contrast() {
    for s in make_synthetic_dataset(4, 8, SceneMode::Day).unwrap() {
        let v = s.rgb.values();
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        assert!(hi - lo > 0.2, "{}: day contrast {}", s.id, hi - lo);
    }
    for s in make_synthetic_dataset(4, 8, SceneMode::Night).unwrap() {
        assert!(mean_std(&s.rgb).1 < 0.05, "{}", s.id);
        assert!(mean_std(&s.thm).1 > 0.05, "{}", s.id);
    }
}

#[test]
fn synthetic_dataset_is_reproducible() {
    let a = make_synthetic_dataset(3, 12, SceneMode::Mixed).unwrap();
    let b = make_synthetic_dataset(3, 12, SceneMode::Mixed).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.rgb.values(), y.rgb.values());
        assert_eq!(x.gt, y.gt);
    }
    assert_ne!(a[0].rgb.values(), make_synthetic_dataset(3, 13, SceneMode::Mixed).unwrap()[0].rgb.values());
}

#[test]
fn perfect_prediction_fills_the_diagonal() {
    let gt = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&gt, &gt).unwrap();
    for g in 0..3 {
        for p in 0..3 {
            assert_eq!(cm.get(g, p), if g == p { 2 } else { 0 });
        }
    }
    let scores = macc_miou(&cm, true);
    assert_eq!((scores.macc, scores.miou), (1.0, 1.0));
}

#[test]
fn single_error_lands_off_diagonal() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&LabelMap::filled(1, 1, 1), &LabelMap::filled(1, 1, 2)).unwrap();
    assert_eq!(cm.get(1, 2), 1);
    assert_eq!(cm.total(), 1);
}

#[test]
fn hand_computed_scores() {
    let cm = ConfusionMatrix::from_rows(&[vec![2, 2], vec![0, 4]]).unwrap();
    let s = macc_miou(&cm, true);
    assert_eq!(s.acc, vec![Some(0.5), Some(1.0)]);
    assert_eq!(s.iou[0], Some(0.5));
    assert!((s.iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((s.macc - 0.75).abs() < 1e-15);
    assert!((s.miou - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn absent_class_is_left_out_of_the_means() {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 4]]).unwrap();
    let s = macc_miou(&cm, true);
    assert_eq!(s.acc[1], None);
    assert!((s.macc - (0.75 + 1.0) / 2.0).abs() < 1e-15);
    let without = macc_miou(&cm, false);
    assert!((without.macc - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn confusion_counts_match_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&LabelMap::new(8, 8, gt.clone()).unwrap(), &LabelMap::new(8, 8, pred.clone()).unwrap()).unwrap();
        for g in 0..4u8 {
            for p in 0..4u8 {
                let n = gt.iter().zip(&pred).filter(|&(&a, &b)| a == g && b == p).count() as u64;
                prop_assert_eq!(cm.get(g as usize, p as usize), n);
            }
        }
    }
}
