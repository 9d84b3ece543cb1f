//! Learned vs frozen gates on synthetic night scenes across several seeds and
//! step counts. Prints the training-set mIoU margin for each run.
//!
//! cargo run --release --example gate_sweep -- [seeds]

use rsfnet::data::{make_synthetic_dataset, SceneMode};
use rsfnet::eval::{evaluate, macc_miou};
use rsfnet::model::{train, GateMode, Model, ModelConfig, TrainConfig};
use rsfnet::seed::substream;

fn main() -> rsfnet::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let samples = make_synthetic_dataset(8, 7, SceneMode::Night)?;
    for seed in 0..seeds {
        for steps in [200usize, 300, 500] {
            let mut miou = vec![];
            for gates in [GateMode::Learned, GateMode::Frozen] {
                let cfg = ModelConfig { gates, ..ModelConfig::toy() };
                let mut model = Model::init(&cfg, &mut substream(seed, "init"))?;
                let tc = TrainConfig { steps, seed, ..TrainConfig::default() };
                train(&mut model, &samples, &tc, |_, _| Ok(()))?;
                let (cm, _) = evaluate(&model, &samples)?;
                miou.push(macc_miou(&cm, true).miou);
            }
            println!(
                "seed {seed} steps {steps:>3}: learned {:.4} frozen {:.4} margin {:+.4}",
                miou[0],
                miou[1],
                miou[0] - miou[1]
            );
        }
    }
    Ok(())
}
