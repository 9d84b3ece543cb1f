//! Collapses a four-branch spatial block into one K×K convolution and checks
//! that both forms agree in inference mode.
//!
//! cargo run --example fuse_branch_block -- [channels] [kernel]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfnet::eval::{branch_block_cost, fused_block_cost};
use rsfnet::reparam::{fuse_branch_block, verify_equivalence, BranchBlockParams};
use rsfnet::DType;

fn main() -> rsfnet::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let c = args.first().copied().unwrap_or(8);
    let k = args.get(1).copied().unwrap_or(5);

    for dtype in [DType::F32, DType::F64] {
        let block = BranchBlockParams::randomized(c, k, dtype, &mut ChaCha8Rng::seed_from_u64(1))?;
        let fused = fuse_branch_block(&block)?;
        let report = verify_equivalence(&block, &fused, 20, 1e-4, 2)?;
        println!(
            "{dtype:?}: fused kernel {:?}, max deviation {:.2e} over {} inputs",
            fused.weight.shape(),
            report.max_abs_deviation,
            report.trials
        );
    }

    let (before, after) = (branch_block_cost(c, k, 32, 32), fused_block_cost(c, k, 32, 32));
    println!("on a 32x32 map: {} -> {} params, {} -> {} FLOPs", before.params, after.params, before.flops, after.flops);
    Ok(())
}
