use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsfnet::model::rsf::channel_weights;
use rsfnet::model::{
    confidence_head, decoder_forward, encoder_forward, feature_recalibration, predict, rsf_forward, BranchSpec, ConfidenceHead,
    ConfidencePair, Decoder, Encoder, GateWiring, Model, ModelConfig, Recalibration, RsfParams, Sgd,
};
use rsfnet::model::rsf::SpatialBlock;
use rsfnet::reparam::BranchBlockParams;
use rsfnet::tensor::ops::{add, conv2d, scale, sum};
use rsfnet::tensor::{DType, Parameters, Role, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        rgb: BranchSpec {
            widths: [4, 6, 8, 8],
            blocks: [1, 1, 1, 1],
        },
        thm: BranchSpec {
            widths: [2, 4, 4, 6],
            blocks: [1, 1, 1, 1],
        },
        reduced: [4, 4, 4, 4],
        inner: 2,
        kernel: 3,
        decoder_width: 4,
        num_classes: 3,
        dtype: DType::F64,
        ..ModelConfig::toy()
    }
}

/// Compares against `tests/fixtures/<name>.txt`, which `RSFNET_BLESS=1` rewrites.
fn golden(name: &str, tensors: &[(&str, &Tensor)]) {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", &format!("{name}.txt")].iter().collect();
    let mut text = String::new();
    for (label, t) in tensors {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let values: Vec<String> = t.values().iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(text, "{label} {}\n{}", shape.join(","), values.join(" "));
    }
    if std::env::var_os("RSFNET_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &text).unwrap();
        return;
    }
    let stored = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e} (run with RSFNET_BLESS=1 to record)", path.display()));
    let mut lines = stored.lines();
    for (label, t) in tensors {
        let header = lines.next().expect("fixture has a header per tensor");
        let (stored_label, stored_shape) = header.split_once(' ').unwrap();
        assert_eq!(stored_label, *label);
        let shape: Vec<usize> = stored_shape.split(',').map(|d| d.parse().unwrap()).collect();
        assert_eq!(shape, t.shape(), "{label}");
        let values: Vec<f64> = lines.next().unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
        for (i, (a, b)) in t.values().iter().zip(&values).enumerate() {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{label}[{i}]: {a} vs recorded {b}");
        }
    }
}

fn set_params(p: &mut dyn Parameters, value: f64) {
    p.visit_mut("", &mut |_, t, role| {
        if role == Role::Param {
            *t = Tensor::full(t.shape(), value, t.dtype()).tracked();
        }
    });
}

#[test]
fn encoder_stage_extents() {
    let cfg = ModelConfig::toy();
    let enc = Encoder::init(&cfg, &mut rng(1));
    let rgb = Tensor::zeros(&[1, 3, 64, 64], cfg.dtype);
    let thm = Tensor::zeros(&[1, 1, 64, 64], cfg.dtype);
    let stages = encoder_forward(&rgb, &thm, &enc, false).unwrap();
    for (s, side) in stages.iter().zip([16, 8, 4, 2]) {
        assert_eq!(&s.f_rgb.shape()[2..], &[side, side]);
        assert_eq!(&s.f_thm.shape()[2..], &[side, side]);
        assert_eq!(s.f_rgb.shape()[1], cfg.rgb.widths[s.s - 1]);
        assert_eq!(s.f_thm.shape()[1], cfg.thm.widths[s.s - 1]);
    }
}

#[test]
fn zero_input_propagates_zero_features() {
    let cfg = ModelConfig::toy();
    let enc = Encoder::init(&cfg, &mut rng(2));
    let stages = encoder_forward(&Tensor::zeros(&[2, 3, 32, 32], cfg.dtype), &Tensor::zeros(&[2, 1, 32, 32], cfg.dtype), &enc, false).unwrap();
    for s in &stages {
        assert!(s.f_rgb.values().iter().chain(s.f_thm.values()).all(|&v| v == 0.0));
    }
}

#[test]
fn encoder_matches_recorded_stages() {
    let cfg = small_config();
    let mut g = rng(901);
    let enc = Encoder::init(&cfg, &mut g);
    let rgb = Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, DType::F64, &mut g);
    let thm = Tensor::uniform(&[2, 1, 64, 64], 0.0, 1.0, DType::F64, &mut g);
    let stages = encoder_forward(&rgb, &thm, &enc, false).unwrap();
    let labels = ["rgb1", "thm1", "rgb2", "thm2", "rgb3", "thm3", "rgb4", "thm4"];
    let tensors: Vec<(&str, &Tensor)> = stages
        .iter()
        .flat_map(|s| [&s.f_rgb, &s.f_thm])
        .zip(labels)
        .map(|(t, l)| (l, t))
        .collect();
    golden("encoder_stages", &tensors);
}

#[test]
fn confidence_head_spot_values() {
    let f4 = Tensor::randn(&[3, 8, 2, 2], 1.0, DType::F64, &mut rng(3));
    let mut head = ConfidenceHead::zeroed(8, DType::F64);
    assert!(confidence_head(&f4, &head).unwrap().values().iter().all(|&p| p == 0.5));
    head.fc2.bias = Tensor::full(&[1], 10.0, DType::F64);
    for &p in confidence_head(&f4, &head).unwrap().values() {
        assert!((p - 0.9999546).abs() < 1e-7, "{p}");
    }
}

#[test]
fn zero_recalibration_kernel_halves_features() {
    let mut g = rng(4);
    let mut p = Recalibration::init(6, 3, 3, DType::F64, &mut g);
    p.kernel = Tensor::zeros(&[3], DType::F64);
    let f = Tensor::randn(&[2, 6, 4, 5], 1.0, DType::F64, &mut g);
    assert!(channel_weights(&f, &p).unwrap().values().iter().all(|&w| w == 0.5));
    let expect = conv2d(&scale(&f, 0.5), &p.reduce).unwrap();
    assert!(feature_recalibration(&f, &p).unwrap().max_abs_diff(&expect).unwrap() < 1e-14);
}

#[test]
fn recalibration_saturates_with_strong_self_weight() {
    let mut g = rng(5);
    let mut p = Recalibration::init(4, 2, 3, DType::F64, &mut g);
    p.kernel = Tensor::new(&[3], vec![0.0, 50.0, 0.0]).unwrap();
    let f = Tensor::full(&[1, 4, 3, 3], 2.0, DType::F64);
    assert!(channel_weights(&f, &p).unwrap().values().iter().all(|&w| w > 1.0 - 1e-12));
}

#[test]
fn default_stage_one_reduces_to_64_channels() {
    let cfg = ModelConfig::default();
    let p = Recalibration::init(cfg.rgb.widths[0], cfg.reduced[0], cfg.recal_kernel, DType::F32, &mut rng(6));
    let f = Tensor::zeros(&[1, cfg.rgb.widths[0], 2, 2], DType::F32);
    assert_eq!(feature_recalibration(&f, &p).unwrap().shape(), &[1, 64, 2, 2]);
}

fn toy_rsf(seed: u64) -> (RsfParams, Tensor, Tensor, ConfidencePair) {
    let mut g = rng(seed);
    let mut p = RsfParams::init(8, 4, 3, DType::F64, &mut g).unwrap();
    for b in [&mut p.rgb, &mut p.thm] {
        b.block = SpatialBlock::Branches(BranchBlockParams::randomized(4, 3, DType::F64, &mut g).unwrap());
    }
    let fr = Tensor::randn(&[2, 8, 6, 6], 1.0, DType::F64, &mut g);
    let ft = Tensor::randn(&[2, 8, 6, 6], 1.0, DType::F64, &mut g);
    let conf = ConfidencePair {
        p_hat_rgb: Tensor::uniform(&[2, 1], 0.0, 1.0, DType::F64, &mut g),
        p_hat_thm: Tensor::uniform(&[2, 1], 0.0, 1.0, DType::F64, &mut g),
    };
    (p, fr, ft, conf)
}

#[test]
fn open_gates_add_the_full_cross_term() {
    let (p, fr, ft, _) = toy_rsf(7);
    let open = ConfidencePair::constant(2, 1.0, 1.0, DType::F64);
    let half = ConfidencePair::constant(2, 0.5, 0.5, DType::F64);
    let (or, ot) = rsf_forward(&fr, &ft, &open, &p, GateWiring::Counterpart, false).unwrap();
    let (hr, ht) = rsf_forward(&fr, &ft, &half, &p, GateWiring::Counterpart, false).unwrap();
    // F̂(1) − F̃ = Ẑ and F̂(½) − F̃ = ½Ẑ
    for (full, halfway, base) in [(&or, &hr, &fr), (&ot, &ht, &ft)] {
        let z = add(full, &scale(base, -1.0)).unwrap();
        let expect = add(base, &scale(&z, 0.5)).unwrap();
        assert!(halfway.max_abs_diff(&expect).unwrap() < 1e-12);
        assert!(z.values().iter().any(|&v| v.abs() > 1e-3));
    }
}

#[test]
fn fusion_stage_matches_recorded_output() {
    let (p, fr, ft, conf) = toy_rsf(902);
    let (or, ot) = rsf_forward(&fr, &ft, &conf, &p, GateWiring::Counterpart, false).unwrap();
    golden("rsf_toy", &[("rgb", &or), ("thm", &ot)]);
    let fused = p.fused().unwrap();
    let (fr2, ft2) = rsf_forward(&fr, &ft, &conf, &fused, GateWiring::Counterpart, false).unwrap();
    assert!(fr2.max_abs_diff(&or).unwrap() <= 1e-5 && ft2.max_abs_diff(&ot).unwrap() <= 1e-5);
}

fn enhanced(cfg: &ModelConfig, seed: u64) -> Vec<(Tensor, Tensor)> {
    let mut g = rng(seed);
    cfg.reduced
        .iter()
        .zip([16, 8, 4, 2])
        .map(|(&c, side)| {
            (
                Tensor::randn(&[2, c, side, side], 1.0, cfg.dtype, &mut g),
                Tensor::randn(&[2, c, side, side], 1.0, cfg.dtype, &mut g),
            )
        })
        .collect()
}

#[test]
fn zero_decoder_outputs_one_half() {
    let cfg = small_config();
    let out = decoder_forward(&enhanced(&cfg, 8), &Decoder::zeroed(&cfg), 64, 64).unwrap();
    assert_eq!(out.shape(), &[2, cfg.num_classes, 64, 64]);
    assert!(out.values().iter().all(|&v| v == 0.5));
}

#[test]
fn decoder_matches_recorded_output() {
    let cfg = small_config();
    let dec = Decoder::init(&cfg, &mut rng(903));
    let out = decoder_forward(&enhanced(&cfg, 904), &dec, 64, 64).unwrap();
    golden("decoder", &[("probs", &out)]);
}

#[test]
fn all_zero_model_ties_to_class_zero() {
    let cfg = small_config();
    let mut model = Model::init(&cfg, &mut rng(9)).unwrap();
    set_params(&mut model, 0.0);
    let mut g = rng(10);
    let rgb = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, DType::F64, &mut g);
    let thm = Tensor::uniform(&[1, 1, 32, 32], 0.0, 1.0, DType::F64, &mut g);
    let out = model.forward(&rgb, &thm, false).unwrap();
    assert!(out.probs.values().iter().all(|&v| v == 0.5));
    assert!(predict(&model, &rgb, &thm).unwrap()[0].values().iter().all(|&c| c == 0));
}

#[test]
fn prediction_matches_recorded_label_map() {
    let cfg = small_config();
    let mut g = rng(905);
    let model = Model::init(&cfg, &mut g).unwrap();
    let rgb = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, DType::F64, &mut g);
    let thm = Tensor::uniform(&[1, 1, 64, 64], 0.0, 1.0, DType::F64, &mut g);
    let labels = &predict(&model, &rgb, &thm).unwrap()[0];
    let as_tensor = Tensor::new(&[64, 64], labels.values().iter().map(|&c| c as f64).collect()).unwrap();
    golden("predict_labels", &[("labels", &as_tensor)]);
}

struct Scalar(Tensor);

impl Parameters for Scalar {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(prefix, &self.0, Role::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        f(prefix, &mut self.0, Role::Param);
    }
}

#[test]
fn momentum_sgd_by_hand() {
    let mut theta = Scalar(Tensor::full(&[1], 2.0, DType::F64).tracked());
    let mut opt = Sgd::new(0.9, 0.0);
    let mut seen = vec![2.0];
    for _ in 0..2 {
        sum(&theta.0).backward().unwrap();
        opt.step(&mut theta, 0.1).unwrap();
        seen.push(theta.0.item());
    }
    assert!((seen[0] - seen[1] - 0.1).abs() < 1e-15);
    assert!((seen[1] - seen[2] - 0.19).abs() < 1e-15);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut theta = Scalar(Tensor::new(&[3], vec![1.5, -2.0, 0.25]).unwrap().tracked());
    let mut opt = Sgd::new(0.9, 0.0);
    for _ in 0..3 {
        opt.step(&mut theta, 0.1).unwrap();
    }
    assert_eq!(theta.0.values(), &[1.5, -2.0, 0.25]);
}

#[test]
fn poly_schedule_endpoints() {
    assert_eq!(rsfnet::model::poly_lr(0.01, 0, 100, 0.9).unwrap(), 0.01);
    assert_eq!(rsfnet::model::poly_lr(0.01, 100, 100, 0.9).unwrap(), 0.0);
    assert!(rsfnet::model::poly_lr(0.01, 101, 100, 0.9).is_err());
}

#[test]
fn zero_lambda_keeps_only_the_segmentation_loss() {
    let seg = Tensor::full(&[1], 1.75, DType::F64);
    let reg = Tensor::full(&[1], 40.0, DType::F64);
    assert_eq!(rsfnet::model::loss::total_loss(&seg, &reg, 0.0).unwrap().item(), 1.75);
    assert_eq!(rsfnet::model::loss::total_loss(&seg, &reg, 0.5).unwrap().item(), 21.75);
}

#[test]
fn checkpoint_with_a_stray_entry_is_rejected() {
    let model = Model::init(&small_config(), &mut rng(11)).unwrap();
    let mut ck = model.to_checkpoint();
    assert!(Model::from_checkpoint(&ck).is_ok());
    ck.insert("decoder.extra.weight", &Tensor::zeros(&[2], DType::F64)).unwrap();
    let err = Model::from_checkpoint(&ck).unwrap_err().to_string();
    assert!(err.contains("decoder.extra.weight"), "{err}");
}
