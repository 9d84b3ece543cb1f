//! Saves a model, reloads it from the checkpoint alone and confirms the
//! predictions match. Also lists the first few stored entries.
//!
//! cargo run --example checkpoint

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfnet::data::Checkpoint;
use rsfnet::model::{Model, ModelConfig};
use rsfnet::{DType, Tensor};

fn main() -> rsfnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::init(&ModelConfig::toy(), &mut rng)?;
    let path = std::env::temp_dir().join("rsfnet-example-toy.ckpt");
    model.to_checkpoint().save(&path)?;

    let ck = Checkpoint::load(&path)?;
    println!("{} entries in {}", ck.len(), path.display());
    for (name, t) in ck.entries().iter().take(6) {
        println!("  {name} {:?}", t.shape());
    }

    let restored = Model::from_checkpoint(&ck)?;
    let rgb = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, DType::F32, &mut rng);
    let thm = Tensor::uniform(&[1, 1, 64, 64], 0.0, 1.0, DType::F32, &mut rng);
    let a = model.forward(&rgb, &thm, false)?.probs;
    let b = restored.forward(&rgb, &thm, false)?.probs;
    println!("max output difference after reload: {:e}", a.max_abs_diff(&b)?);
    Ok(())
}
