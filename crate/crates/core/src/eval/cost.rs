//! Parameter and FLOP counts derived from a configuration.
//!
//! Convention: one multiply-accumulate is 2 FLOPs. A convolution costs
//! 2·C_out·C_in·K_h·K_w·H_out·W_out plus C_out·H_out·W_out for a bias; a
//! fully-connected layer 2·in·out plus out for a bias; inference-mode batch
//! normalization 2 per element. Activations, resizing and elementwise
//! arithmetic are not counted.

use std::time::Instant;

use crate::model::encoder::STRIDE;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

/// Trainable parameters and inference FLOPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.params += o.params;
        self.flops += o.flops;
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(mut self, o: Cost) -> Cost {
        self += o;
        self
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

pub fn conv_cost(c_out: usize, c_in: usize, (kh, kw): (usize, usize), (h_out, w_out): (usize, usize), bias: bool) -> Cost {
    let (c_out, c_in, kh, kw, h_out, w_out) = (c_out as u64, c_in as u64, kh as u64, kw as u64, h_out as u64, w_out as u64);
    let mut cost = Cost {
        params: c_out * c_in * kh * kw,
        flops: 2 * c_out * c_in * kh * kw * h_out * w_out,
    };
    if bias {
        cost.params += c_out;
        cost.flops += c_out * h_out * w_out;
    }
    cost
}

pub fn fc_cost(inp: usize, out: usize, bias: bool) -> Cost {
    let (i, o) = (inp as u64, out as u64);
    Cost {
        params: i * o + if bias { o } else { 0 },
        flops: 2 * i * o + if bias { o } else { 0 },
    }
}

/// γ and β as parameters; scale and shift per element.
pub fn bn_cost(c: usize, h: usize, w: usize) -> Cost {
    Cost {
        params: 2 * c as u64,
        flops: 2 * (c * h * w) as u64,
    }
}

/// 1D channel convolution with a bias-free kernel of length k.
pub fn conv1d_cost(c: usize, k: usize) -> Cost {
    Cost {
        params: k as u64,
        flops: 2 * (c * k) as u64,
    }
}

/// The four-branch K×K block over C channels at h×w.
pub fn branch_block_cost(c: usize, k: usize, h: usize, w: usize) -> Cost {
    let hw = (h, w);
    conv_cost(c, c, (k, k), hw, false)
        + bn_cost(c, h, w)
        + conv_cost(c, c, (1, 1), hw, false)
        + bn_cost(c, h, w)
        + conv_cost(c, c, (1, 1), hw, false)
        + conv_cost(c, c, (1, k), hw, false)
        + bn_cost(c, h, w)
        + conv_cost(c, c, (1, 1), hw, false)
        + conv_cost(c, c, (k, 1), hw, false)
        + bn_cost(c, h, w)
}

/// The single K×K convolution with bias that replaces the block.
pub fn fused_block_cost(c: usize, k: usize, h: usize, w: usize) -> Cost {
    conv_cost(c, c, (k, k), (h, w), true)
}

/// Cost of each part of the network.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    pub encoder: Cost,
    pub heads: Cost,
    pub recalibration: Cost,
    pub fusion: Cost,
    /// The spatial blocks only (already part of `fusion`).
    pub spatial_blocks: Cost,
    pub decoder: Cost,
}

impl CostBreakdown {
    pub fn total(&self) -> Cost {
        self.encoder + self.heads + self.recalibration + self.fusion + self.decoder
    }
}

fn encoder_branch_cost(in_c: usize, widths: &[usize; 4], blocks: &[usize; 4], h: usize, w: usize) -> (Cost, Vec<(usize, usize)>) {
    let mut cost = Cost::default();
    let (mut h, mut w) = (h, w);
    let mut c = in_c;
    for _ in 0..2 {
        h = conv_out(h, 3, 2, 1);
        w = conv_out(w, 3, 2, 1);
        cost += conv_cost(widths[0], c, (3, 3), (h, w), false) + bn_cost(widths[0], h, w);
        c = widths[0];
    }
    let mut extents = Vec::with_capacity(4);
    for s in 0..4 {
        for b in 0..blocks[s] {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let c_out = widths[s];
            let (ho, wo) = (conv_out(h, 3, stride, 1), conv_out(w, 3, stride, 1));
            cost += conv_cost(c_out, c, (3, 3), (ho, wo), false) + bn_cost(c_out, ho, wo);
            cost += conv_cost(c_out, c_out, (3, 3), (ho, wo), false) + bn_cost(c_out, ho, wo);
            if stride != 1 || c != c_out {
                cost += conv_cost(c_out, c, (1, 1), (ho, wo), false) + bn_cost(c_out, ho, wo);
            }
            (h, w, c) = (ho, wo, c_out);
        }
        extents.push((h, w));
    }
    (cost, extents)
}

/// Counts for a batch of one h×w image pair. `fused` selects the
/// single-convolution form of every spatial block.
pub fn count_cost(cfg: &ModelConfig, h: usize, w: usize, fused: bool) -> Result<CostBreakdown> {
    cfg.validate()?;
    let stride = STRIDE;
    if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "count_cost",
            format!("height {h} and width {w} must be positive multiples of {stride}"),
        ));
    }
    let mut out = CostBreakdown::default();
    let (enc_rgb, extents) = encoder_branch_cost(3, &cfg.rgb.widths, &cfg.rgb.blocks, h, w);
    let (enc_thm, _) = encoder_branch_cost(1, &cfg.thm.widths, &cfg.thm.blocks, h, w);
    out.encoder = enc_rgb + enc_thm;

    for c4 in [cfg.rgb.widths[3], cfg.thm.widths[3]] {
        let hidden = ModelConfig::head_hidden(c4);
        out.heads += fc_cost(c4, hidden, true) + fc_cost(hidden, 1, true);
    }

    let (c_inner, k) = (cfg.inner, cfg.kernel);
    for s in 0..4 {
        let (hs, ws) = extents[s];
        let cr = cfg.reduced[s];
        for c_s in [cfg.rgb.widths[s], cfg.thm.widths[s]] {
            out.recalibration += conv1d_cost(c_s, cfg.recal_kernel) + conv_cost(cr, c_s, (1, 1), (hs, ws), true);
        }
        for _ in 0..2 {
            let block = if fused {
                fused_block_cost(c_inner, k, hs, ws)
            } else {
                branch_block_cost(c_inner, k, hs, ws)
            };
            out.spatial_blocks += block;
            out.fusion += conv_cost(c_inner, cr, (1, 1), (hs, ws), false)
                + bn_cost(c_inner, hs, ws)
                + block
                + conv_cost(cr, 2 * c_inner, (1, 1), (hs, ws), true);
        }
    }

    let d = cfg.decoder_width;
    for _ in 0..2 {
        for s in 0..4 {
            out.decoder += conv_cost(d, cfg.reduced[s], (1, 1), extents[s], true);
        }
        for s in (0..3).rev() {
            out.decoder += conv_cost(d, d, (3, 3), extents[s + 1], true);
            out.decoder += conv_cost(d, d, (3, 3), extents[s], true) + conv_cost(d, d, (3, 3), extents[s], true);
        }
    }
    out.decoder += conv_cost(cfg.num_classes, d, (1, 1), extents[0], true);
    Ok(out)
}

/// Wall-clock statistics in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub trials: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub std_ms: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::invalid("latency: need at least one trial"));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(LatencyStats {
            trials: samples_ms.len(),
            mean_ms: mean,
            p50_ms: if samples_ms.len() == 1 { mean } else { percentile(&sorted, 0.5) },
            p95_ms: percentile(&sorted, 0.95),
            std_ms: var.sqrt(),
        })
    }
}

/// Times `run` on a single worker thread after `warmup` untimed calls.
pub fn bench_latency(trials: usize, warmup: usize, mut run: impl FnMut() -> Result<()> + Send) -> Result<LatencyStats> {
    if trials == 0 {
        return Err(Error::invalid("bench_latency: trials must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(format!("bench_latency: thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..warmup {
            run()?;
        }
        let mut samples = Vec::with_capacity(trials);
        for _ in 0..trials {
            let start = Instant::now();
            run()?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        LatencyStats::from_samples(&samples)
    })
}
