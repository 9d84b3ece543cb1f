//! Trains the toy network on synthetic night scenes twice, once with learned
//! confidence gates and once with the gates frozen at zero, and compares the
//! training-set mIoU.
//!
//! cargo run --release --example train_night -- [steps] [scenes]

use std::time::Instant;

use rsfnet::data::{make_synthetic_dataset, SceneMode};
use rsfnet::eval::{evaluate, macc_miou};
use rsfnet::model::{train, GateMode, Model, ModelConfig, TrainConfig};
use rsfnet::seed::substream;

fn main() -> rsfnet::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(500);
    let scenes = args.get(1).copied().unwrap_or(8);
    let samples = make_synthetic_dataset(scenes, 7, SceneMode::Night)?;

    for gates in [GateMode::Learned, GateMode::Frozen] {
        let cfg = ModelConfig { gates, ..ModelConfig::toy() };
        let mut model = Model::init(&cfg, &mut substream(0, "init"))?;
        let tc = TrainConfig { steps, seed: 0, ..TrainConfig::default() };
        let start = Instant::now();
        let log = train(&mut model, &samples, &tc, |s, _| {
            if s.step % 50 == 0 {
                println!("  step {:>4}  loss {:.4}  seg {:.4}  reg {:.4}", s.step, s.loss, s.seg, s.reg);
            }
            Ok(())
        })?;
        let (cm, _) = evaluate(&model, &samples)?;
        let scores = macc_miou(&cm, true);
        println!(
            "{gates:?}: final loss {:.4}, train mIoU {:.4}, mAcc {:.4} ({:.1}s)",
            log.last().map_or(f64::NAN, |s| s.loss),
            scores.miou,
            scores.macc,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
