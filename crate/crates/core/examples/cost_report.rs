//! Parameter and FLOP counts for the toy and full-size networks, before and
//! after fusing the spatial blocks.
//!
//! cargo run --example cost_report -- [height] [width]

use rsfnet::eval::{count_cost, Cost};
use rsfnet::model::ModelConfig;

fn row(name: &str, c: Cost) {
    println!("  {name:<14} {:>12} params {:>16} FLOPs", c.params, c.flops);
}

fn main() -> rsfnet::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let h = args.first().copied().unwrap_or(480);
    let w = args.get(1).copied().unwrap_or(640);
    println!("FLOPs count 2 per multiply-accumulate; input {h}x{w}");

    for (name, cfg) in [("toy", ModelConfig::toy()), ("full", ModelConfig::default())] {
        for fused in [false, true] {
            let b = count_cost(&cfg, h, w, fused)?;
            println!("{name}{}", if fused { " (fused)" } else { "" });
            row("encoder", b.encoder);
            row("heads", b.heads);
            row("recalibration", b.recalibration);
            row("fusion", b.fusion);
            row("  spatial", b.spatial_blocks);
            row("decoder", b.decoder);
            row("total", b.total());
        }
    }
    Ok(())
}
