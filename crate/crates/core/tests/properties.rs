use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsfnet::data::{augment, load_dataset, save_dataset, AugmentPolicy, Checkpoint, LabelMap, SamplePair, Transform};
use rsfnet::eval::{branch_block_cost, fused_block_cost, macc_miou, ConfusionMatrix};
use rsfnet::model::loss::{segmentation_loss, smooth_l1};
use rsfnet::model::{confidence_head, ConfidenceHead, Model, ModelConfig};
use rsfnet::plg::{fine_grained_saliency, generate_pseudo_labels, iou_score, otsu_binarize, BinaryMask, IntensityMap, PlgConfig, SaliencyMap};
use rsfnet::reparam::{branch_forward, fuse_branch_block, BranchBlockParams};
use rsfnet::tensor::ops::{concat_channels, conv2d, global_avg_pool, linear, relu, slice_channels};
use rsfnet::tensor::{ConvParams, DType, Parameters, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn identity_kernel_conv_is_identity(c in 1usize..4, h in 1usize..6, w in 1usize..6, k in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>()) {
        let x = Tensor::randn(&[2, c, h, w], 1.0, DType::F64, &mut rng(seed));
        let mut wv = vec![0.0; c * c * k * k];
        for i in 0..c {
            wv[((i * c + i) * k + k / 2) * k + k / 2] = 1.0;
        }
        let p = ConvParams::new(Tensor::new(&[c, c, k, k], wv).unwrap(), None, (1, 1), (k / 2, k / 2)).unwrap();
        prop_assert!(conv2d(&x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn pooled_values_stay_in_range(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = Tensor::randn(&[2, c, h, w], 3.0, DType::F64, &mut rng(seed));
        let g = global_avg_pool(&x).unwrap();
        prop_assert!(g.values().iter().all(|&v| v >= x.min_value() - 1e-12 && v <= x.max_value() + 1e-12));
    }

    #[test]
    fn concat_then_slice_round_trips(ca in 1usize..4, cb in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut g = rng(seed);
        let a = Tensor::randn(&[2, ca, h, w], 1.0, DType::F64, &mut g);
        let b = Tensor::randn(&[2, cb, h, w], 1.0, DType::F64, &mut g);
        let cat = concat_channels(&[&a, &b]).unwrap();
        prop_assert!(slice_channels(&cat, 0, ca).unwrap().bit_eq(&a));
        prop_assert!(slice_channels(&cat, ca, cb).unwrap().bit_eq(&b));
    }

    #[test]
    fn conv_is_deterministic(seed in any::<u64>()) {
        let mut g = rng(seed);
        let x = Tensor::randn(&[3, 4, 7, 6], 1.0, DType::F32, &mut g);
        let p = ConvParams::same(5, 4, (3, 3), true, DType::F32, &mut g);
        prop_assert!(conv2d(&x, &p).unwrap().bit_eq(&conv2d(&x, &p).unwrap()));
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn fusion_matches_branches_in_f64(c in 1usize..7, k in prop::sample::select(vec![3usize, 5, 7]), seed in any::<u64>()) {
        let mut g = rng(seed);
        let b = BranchBlockParams::randomized(c, k, DType::F64, &mut g).unwrap();
        let fused = fuse_branch_block(&b).unwrap();
        let x = Tensor::randn(&[2, c, k + 2, k + 3], 1.0, DType::F64, &mut g);
        let dev = branch_forward(&x, &b, false).unwrap().max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap();
        prop_assert!(dev <= 1e-10, "deviation {dev}");
    }

    #[test]
    fn fused_parameter_count_is_closed_form(c in 1usize..9, k in prop::sample::select(vec![3usize, 5, 7]), seed in any::<u64>()) {
        let b = BranchBlockParams::randomized(c, k, DType::F64, &mut rng(seed)).unwrap();
        let fused = fuse_branch_block(&b).unwrap();
        prop_assert_eq!(fused.param_count(), c * c * k * k + c);
    }

    #[test]
    fn refusing_a_fused_kernel_changes_nothing(c in 1usize..6, k in prop::sample::select(vec![3usize, 5]), seed in any::<u64>()) {
        let b = BranchBlockParams::randomized(c, k, DType::F64, &mut rng(seed)).unwrap();
        let once = fuse_branch_block(&b).unwrap();
        let twice = fuse_branch_block(&BranchBlockParams::from_single(once.clone()).unwrap()).unwrap();
        prop_assert!(twice.weight.bit_eq(&once.weight));
        prop_assert!(twice.bias.unwrap().bit_eq(once.bias.as_ref().unwrap()));
    }

    #[test]
    fn fused_block_costs_less(c in 1usize..64, k in prop::sample::select(vec![3usize, 5, 7, 9]), h in 1usize..40, w in 1usize..40) {
        let multi = branch_block_cost(c, k, h, w);
        let fused = fused_block_cost(c, k, h, w);
        prop_assert!(fused.params < multi.params);
        prop_assert!(fused.flops < multi.flops);
    }
}

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(any::<bool>(), h * w))
    })
}

fn saliency(h: usize, w: usize, v: Vec<f64>) -> SaliencyMap {
    SaliencyMap::new(Tensor::new(&[h, w], v).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded((h, w, a, b) in mask_strategy()) {
        let ma = BinaryMask::from_bools(h, w, a.iter().copied()).unwrap();
        let mb = BinaryMask::from_bools(h, w, b.iter().copied()).unwrap();
        let ab = iou_score(&ma, &mb).unwrap();
        prop_assert_eq!(ab, iou_score(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        let identical_nonempty = a == b && a.iter().any(|&x| x);
        prop_assert_eq!(ab == 1.0, identical_nonempty);
    }

    #[test]
    fn otsu_threshold_within_range(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let m = Tensor::uniform(&[h, w], 0.0, 255.0, DType::F64, &mut rng(seed));
        let (t, _) = otsu_binarize(&saliency(h, w, m.to_vec()));
        prop_assert!(t >= m.min_value() && t <= m.max_value());
    }

    #[test]
    fn otsu_mask_survives_affine_rescaling(
        v in prop::collection::vec(0u32..64, 4..80),
        a in 1u32..4,
        b in 0u32..40,
    ) {
        let n = v.len();
        let base: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let moved: Vec<f64> = v.iter().map(|&x| (a * x + b) as f64).collect();
        let (_, m0) = otsu_binarize(&saliency(1, n, base));
        let (_, m1) = otsu_binarize(&saliency(1, n, moved));
        prop_assert!(m0.tensor().bit_eq(m1.tensor()));
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn saliency_shifts_with_its_input(dy in 0usize..4, dx in 0usize..4, seed in any::<u64>()) {
        let (size, patch, start) = (40usize, 8usize, 14usize);
        let blob = Tensor::uniform(&[patch * patch], 0.0, 255.0, DType::F64, &mut rng(seed));
        let place = |oy: usize, ox: usize| {
            let mut img = vec![90.0; size * size];
            for y in 0..patch {
                for x in 0..patch {
                    img[(oy + y) * size + ox + x] = blob.values()[y * patch + x].floor();
                }
            }
            IntensityMap::new(Tensor::new(&[size, size], img).unwrap()).unwrap()
        };
        let scales = [1, 2, 3];
        let a = fine_grained_saliency(&place(start, start), &scales).unwrap();
        let b = fine_grained_saliency(&place(start + dy, start + dx), &scales).unwrap();
        for y in 6..size - 10 {
            for x in 6..size - 10 {
                prop_assert_eq!(a.values()[y * size + x], b.values()[(y + dy) * size + x + dx]);
            }
        }
    }

    #[test]
    fn segmentation_loss_is_non_negative(seed in any::<u64>()) {
        let mut g = rng(seed);
        let y_hat = Tensor::uniform(&[2, 3, 4, 4], 0.0, 1.0, DType::F64, &mut g);
        let labels: Vec<LabelMap> = (0..2)
            .map(|i| LabelMap::new(4, 4, (0..16).map(|j| ((j * 7 + i + seed as usize) % 3) as u8).collect()).unwrap())
            .collect();
        let y = rsfnet::model::loss::one_hot(&labels, 3, DType::F64).unwrap();
        let loss = segmentation_loss(&y_hat, &y, &[0.5, 0.3, 0.2]).unwrap();
        prop_assert!(loss.item() >= 0.0);
    }

    #[test]
    fn confidence_stays_inside_unit_interval(c in 1usize..12, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut g = rng(seed);
        let head = ConfidenceHead::init(c, DType::F64, &mut g);
        let f4 = Tensor::randn(&[3, c, 2, 2], scale, DType::F64, &mut g);
        let p = confidence_head(&f4, &head).unwrap();
        let hidden = relu(&linear(&global_avg_pool(&f4).unwrap(), &head.fc1).unwrap());
        let logits = linear(&hidden, &head.fc2).unwrap();
        for (&v, &z) in p.values().iter().zip(logits.values()) {
            prop_assert!((0.0..=1.0).contains(&v));
            // beyond |z| ≈ 36.7 the sigmoid rounds to 0 or 1 in f64
            if z.abs() < 30.0 {
                prop_assert!(v > 0.0 && v < 1.0, "logit {z} gave {v}");
            }
        }
    }

    #[test]
    fn metric_ordering_and_relabeling(counts in prop::collection::vec(0u64..20, 16), perm in Just(vec![2usize, 0, 3, 1])) {
        let rows: Vec<Vec<u64>> = counts.chunks(4).map(<[u64]>::to_vec).collect();
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let s = macc_miou(&cm, true);
        for (a, i) in s.acc.iter().zip(&s.iou) {
            if let (Some(a), Some(i)) = (a, i) {
                prop_assert!(0.0 <= *i && i <= a && *a <= 1.0);
            }
        }
        let mut moved = vec![vec![0u64; 4]; 4];
        for g in 0..4 {
            for p in 0..4 {
                moved[perm[g]][perm[p]] = rows[g][p];
            }
        }
        let t = macc_miou(&ConfusionMatrix::from_rows(&moved).unwrap(), true);
        prop_assert!((s.macc - t.macc).abs() < 1e-12 && (s.miou - t.miou).abs() < 1e-12);
        for g in 0..4 {
            prop_assert_eq!(s.iou[g], t.iou[perm[g]]);
        }
    }

    #[test]
    fn checkpoints_round_trip(shape in prop::collection::vec(1usize..4, 0..4), f64_dtype in any::<bool>(), seed in any::<u64>()) {
        let dtype = if f64_dtype { DType::F64 } else { DType::F32 };
        let t = Tensor::randn(&shape, 1.0, dtype, &mut rng(seed));
        let mut ck = Checkpoint::new();
        ck.insert("a.b", &t).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let got = back.get("a.b").unwrap();
        prop_assert!(got.bit_eq(&t));
        prop_assert_eq!(got.dtype(), dtype);
    }
}

fn coordinate_sample(h: usize, w: usize) -> SamplePair {
    let code: Vec<f64> = (0..h * w).map(|i| (i % 97) as f64 / 96.0).collect();
    let rgb: Vec<f64> = code.iter().chain(&code).chain(&code).copied().collect();
    let gt = LabelMap::new(h, w, (0..h * w).map(|i| (i % 5) as u8).collect()).unwrap();
    SamplePair::new(
        "coords",
        Tensor::with_dtype(&[3, h, w], rgb, DType::F64).unwrap(),
        Tensor::with_dtype(&[1, h, w], code, DType::F64).unwrap(),
        gt,
        None,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn augmentation_moves_all_modalities_together(seed in any::<u64>(), crop in any::<bool>()) {
        let (h, w) = (12, 14);
        let s = coordinate_sample(h, w);
        let policy = AugmentPolicy {
            flip_prob: 0.5,
            crop: crop.then_some((9, 10)),
            max_rotation_deg: 20.0,
        };
        let out = augment(&s, &mut rng(seed), &policy).unwrap();
        let t = Transform::sample(h, w, &policy, &mut rng(seed)).unwrap();
        prop_assert!(out.gt == t.apply(&s).unwrap().gt);
        let (oh, ow) = (out.height(), out.width());
        let plane = oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let i = y * ow + x;
                let thm = out.thm.values()[i];
                for ch in 0..3 {
                    prop_assert_eq!(out.rgb.values()[ch * plane + i], thm);
                }
                let (sy, sx) = t.source(y, x);
                let (ry, rx) = ((sy + 0.5).floor(), (sx + 0.5).floor());
                let expect = if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
                    s.gt.get(ry as usize, rx as usize)
                } else {
                    0
                };
                prop_assert_eq!(out.gt.get(y, x), expect);
            }
        }
    }
}

#[test]
fn dataset_loads_sorted_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = rsfnet::data::make_synthetic_dataset(4, 3, rsfnet::data::SceneMode::Mixed).unwrap();
    samples.reverse();
    save_dataset(dir.path(), "train", &samples).unwrap();
    let ids: Vec<String> = load_dataset(dir.path(), "train").unwrap().into_iter().map(|s| s.id).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(ids.len(), 4);
}

#[test]
fn pseudo_labels_ignore_processing_order() {
    let samples = rsfnet::data::make_synthetic_dataset(6, 11, rsfnet::data::SceneMode::Mixed).unwrap();
    let cfg = PlgConfig { num_classes: 3, ..PlgConfig::default() };
    let forward: Vec<_> = samples.iter().map(|s| generate_pseudo_labels(&s.rgb, &s.thm, &s.gt, &cfg).unwrap()).collect();
    let mut backward: Vec<_> = samples.iter().rev().map(|s| generate_pseudo_labels(&s.rgb, &s.thm, &s.gt, &cfg).unwrap()).collect();
    backward.reverse();
    assert_eq!(forward, backward);
}

#[test]
fn smooth_l1_is_continuous_at_one() {
    let below = smooth_l1(1.0 - 1e-9);
    let above = smooth_l1(1.0 + 1e-9);
    assert!((below - smooth_l1(1.0)).abs() < 1e-8 && (above - smooth_l1(1.0)).abs() < 1e-8);
}

#[test]
fn fused_model_has_fewer_parameters() {
    let model = Model::init(&ModelConfig::toy(), &mut rng(5)).unwrap();
    let fused = model.fused().unwrap();
    assert!(fused.param_count() < model.param_count());
}
