//! Compares analytic gradients with central differences for a small
//! conv, batch-norm and sigmoid pipeline.
//!
//! cargo run --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfnet::tensor::gradcheck::compare;
use rsfnet::tensor::layers::{BatchNormParams, ConvParams};
use rsfnet::tensor::ops::{batch_norm, conv2d, mean, sigmoid};
use rsfnet::{DType, Tensor};

fn main() -> rsfnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        Tensor::randn(&[2, 3, 6, 6], 1.0, DType::F64, &mut rng),
        Tensor::randn(&[4, 3, 3, 3], 0.5, DType::F64, &mut rng),
        Tensor::randn(&[4], 0.5, DType::F64, &mut rng),
        Tensor::uniform(&[4], 0.5, 1.5, DType::F64, &mut rng),
        Tensor::randn(&[4], 0.5, DType::F64, &mut rng),
    ];
    let names = ["input", "conv weight", "conv bias", "bn gamma", "bn beta"];

    let results = compare(&inputs, 1e-5, |t| {
        let conv = ConvParams::new(t[1].clone(), Some(t[2].clone()), (1, 1), (1, 1))?;
        let bn = BatchNormParams::new(t[3].clone(), t[4].clone(), Tensor::zeros(&[4], DType::F64), Tensor::ones(&[4], DType::F64), 1e-5, 0.1)?;
        Ok(mean(&sigmoid(&batch_norm(&conv2d(&t[0], &conv)?, &bn, true)?)))
    })?;
    for (name, c) in names.iter().zip(&results) {
        println!("{name:<12} relative error {:.2e}", c.relative_error());
    }
    Ok(())
}
