//! Differentiable operators. Every function returns a new tensor; when any
//! input is tracked the result records how to push gradients back.

use super::broadcast::Broadcast;
use super::{BatchNormParams, LinearParams, Tensor};
use crate::error::{Error, Result};

pub use super::conv::{conv1d_channel, conv2d};

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    // (grad, a, b) -> (da, db)
    df: fn(f64, f64, f64) -> (f64, f64),
) -> Result<Tensor> {
    let plan = Broadcast::new(op, a.shape(), b.shape())?;
    let (av, bv) = (a.values(), b.values());
    let out = plan
        .a_index
        .iter()
        .zip(&plan.b_index)
        .map(|(&i, &j)| f(av[i], bv[j]))
        .collect();
    let (sa, sb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        plan.out_shape.clone(),
        a.dtype().promote(b.dtype()),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let (av, bv) = (sa.values(), sb.values());
            let mut da = needs[0].then(|| vec![0.0; av.len()]);
            let mut db = needs[1].then(|| vec![0.0; bv.len()]);
            for ((&i, &j), &go) in plan.a_index.iter().zip(&plan.b_index).zip(g) {
                let (ga, gb) = df(go, av[i], bv[j]);
                if let Some(da) = da.as_mut() {
                    da[i] += ga;
                }
                if let Some(db) = db.as_mut() {
                    db[j] += gb;
                }
            }
            vec![da, db]
        }),
    ))
}

/// Broadcasting elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y, |g, _, _| (g, g))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
}

/// Broadcasting elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Tensor {
    let out: Vec<f64> = x.values().iter().map(|&v| f(v)).collect();
    let xs = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        x.dtype(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            vec![Some(
                g.iter()
                    .zip(xs.values())
                    .map(|(&go, &v)| df(go, v))
                    .collect(),
            )]
        }),
    )
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    unary(x, |v| v * s, move |g, _| g * s)
}

/// max(x, 0); the derivative at exactly 0 is taken as 0.
pub fn relu(x: &Tensor) -> Tensor {
    unary(x, |v| v.max(0.0), |g, v| if v > 0.0 { g } else { 0.0 })
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 1/(1+exp(−x)).
pub fn sigmoid(x: &Tensor) -> Tensor {
    unary(x, sigmoid_scalar, |g, v| {
        let s = sigmoid_scalar(v);
        g * s * (1.0 - s)
    })
}

/// Sum of all entries, as a one-element tensor.
pub fn sum(x: &Tensor) -> Tensor {
    let n = x.numel();
    let total = x.values().iter().sum();
    Tensor::from_op(
        vec![1],
        x.dtype(),
        vec![total],
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    scale(&sum(x), 1.0 / x.numel() as f64)
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {shape:?}", x.shape()),
        ));
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.dtype(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(|g, _| vec![Some(g.to_vec())]),
    ))
}

/// The channel axis is the third from the end ([C,H,W] or [N,C,H,W]).
fn channel_axis(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.len() < 3 {
        return Err(Error::shape(op, format!("need at least [C,H,W], got {shape:?}")));
    }
    Ok(shape.len() - 3)
}

/// Concatenates along the channel axis; all other extents must match.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels: nothing to concatenate"))?;
    let axis = channel_axis("concat_channels", first.shape())?;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut channels = Vec::with_capacity(parts.len());
    let mut dtype = first.dtype();
    for p in parts {
        let s = p.shape();
        if s.len() != first.rank() || s[..axis] != first.shape()[..axis] || s[axis + 1..] != first.shape()[axis + 1..] {
            return Err(Error::shape(
                "concat_channels",
                format!("{s:?} does not match {:?} outside the channel axis", first.shape()),
            ));
        }
        channels.push(s[axis]);
        dtype = dtype.promote(p.dtype());
    }
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &c) in parts.iter().zip(&channels) {
            out.extend_from_slice(&p.values()[o * c * inner..(o + 1) * c * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        shape,
        dtype,
        out,
        parts.iter().map(|&t| t.clone()).collect(),
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&channels)
                .map(|(&need, &c)| need.then(|| Vec::with_capacity(outer * c * inner)))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gp, &c) in grads.iter_mut().zip(&channels) {
                    if let Some(gp) = gp.as_mut() {
                        gp.extend_from_slice(&g[offset..offset + c * inner]);
                    }
                    offset += c * inner;
                }
            }
            grads
        }),
    ))
}

/// Channels `start..start+len` along the channel axis.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let axis = channel_axis("slice_channels", x.shape())?;
    let c = x.shape()[axis];
    if len == 0 || start + len > c {
        return Err(Error::shape(
            "slice_channels",
            format!("range {start}..{} outside {c} channels", start + len),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * c + start) * inner;
        out.extend_from_slice(&x.values()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let total = x.numel();
    Ok(Tensor::from_op(
        shape,
        x.dtype(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut dx = vec![0.0; total];
            for o in 0..outer {
                let base = (o * c + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }),
    ))
}

/// y = x·Wᵀ + b for x [N,in].
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let (n, inp) = match x.shape() {
        &[n, i] => (n, i),
        s => return Err(Error::shape("linear", format!("expected [N,in], got {s:?}"))),
    };
    let (out_f, w_in) = (p.out_features(), p.in_features());
    if inp != w_in {
        return Err(Error::shape(
            "linear",
            format!("input features {inp} do not match weight input features {w_in}"),
        ));
    }
    let (xv, wv, bv) = (x.values(), p.weight.values(), p.bias.values());
    let mut out = vec![0.0; n * out_f];
    for i in 0..n {
        for o in 0..out_f {
            let dot: f64 = xv[i * inp..(i + 1) * inp]
                .iter()
                .zip(&wv[o * inp..(o + 1) * inp])
                .map(|(a, b)| a * b)
                .sum();
            out[i * out_f + o] = dot + bv[o];
        }
    }
    let (xs, ws) = (x.clone(), p.weight.clone());
    Ok(Tensor::from_op(
        vec![n, out_f],
        x.dtype().promote(p.weight.dtype()).promote(p.bias.dtype()),
        out,
        vec![x.clone(), p.weight.clone(), p.bias.clone()],
        Box::new(move |g, needs| {
            let (xv, wv) = (xs.values(), ws.values());
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; n * inp];
                for i in 0..n {
                    for o in 0..out_f {
                        let go = g[i * out_f + o];
                        for k in 0..inp {
                            dx[i * inp + k] += go * wv[o * inp + k];
                        }
                    }
                }
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; out_f * inp];
                for i in 0..n {
                    for o in 0..out_f {
                        let go = g[i * out_f + o];
                        for k in 0..inp {
                            dw[o * inp + k] += go * xv[i * inp + k];
                        }
                    }
                }
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![0.0; out_f];
                for i in 0..n {
                    for o in 0..out_f {
                        db[o] += g[i * out_f + o];
                    }
                }
                db
            });
            vec![dx, dw, db]
        }),
    ))
}

/// Mean over each H×W plane: [N,C,H,W] → [N,C].
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let out = x
        .values()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_op(
        vec![n, c],
        x.dtype(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let inv = 1.0 / plane as f64;
            vec![Some(g.iter().flat_map(|&go| std::iter::repeat_n(go * inv, plane)).collect())]
        }),
    ))
}

/// Source taps for one axis under half-pixel-center sampling.
fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers (align-corners off).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize: output extents must be positive"));
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let xv = x.values();
    let mut out = vec![0.0; n * c * out_h * out_w];
    for p in 0..n * c {
        let src = &xv[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, out_h, out_w],
        x.dtype(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut dx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dp = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let go = gp[oy * out_w + ox];
                        dp[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                        dp[y0 * w + x1] += go * (1.0 - fy) * fx;
                        dp[y1 * w + x0] += go * fy * (1.0 - fx);
                        dp[y1 * w + x1] += go * fy * fx;
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Batch normalization of [N,C,H,W].
///
/// Training mode normalizes with the batch mean and biased variance and moves
/// the running statistics by `momentum` (the running variance uses the
/// unbiased estimate). Inference mode uses the running statistics. The eps
/// term is always added under the square root.
pub fn batch_norm(x: &Tensor, p: &BatchNormParams, training: bool) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    if c != p.channels() {
        return Err(Error::shape(
            "batch_norm",
            format!("input channels {c} do not match {} normalization channels", p.channels()),
        ));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let xv = x.values();
    let channel_iter = move |ch: usize| (0..n).flat_map(move |i| ((i * c + ch) * plane)..((i * c + ch + 1) * plane));

    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let mean: Vec<f64> = (0..c)
            .map(|ch| channel_iter(ch).map(|k| xv[k]).sum::<f64>() / count)
            .collect();
        let var: Vec<f64> = (0..c)
            .map(|ch| channel_iter(ch).map(|k| (xv[k] - mean[ch]).powi(2)).sum::<f64>() / count)
            .collect();
        let r = p.running();
        let m = p.momentum;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let new_mean: Vec<f64> = r.mean.values().iter().zip(&mean).map(|(rm, bm)| (1.0 - m) * rm + m * bm).collect();
        let new_var: Vec<f64> = r
            .var
            .values()
            .iter()
            .zip(&var)
            .map(|(rv, bv)| (1.0 - m) * rv + m * bv * unbias)
            .collect();
        p.set_running(
            Tensor::with_dtype(&[c], new_mean, r.mean.dtype())?,
            Tensor::with_dtype(&[c], new_var, r.var.dtype())?,
        );
        (mean, var)
    } else {
        let r = p.running();
        (r.mean.to_vec(), r.var.to_vec())
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let (gv, bv) = (p.gamma.values(), p.beta.values());
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for ch in 0..c {
        for k in channel_iter(ch) {
            xhat[k] = (xv[k] - mean[ch]) * inv_std[ch];
            out[k] = gv[ch] * xhat[k] + bv[ch];
        }
    }
    let gamma = p.gamma.clone();
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        x.dtype().promote(p.gamma.dtype()).promote(p.beta.dtype()),
        out,
        vec![x.clone(), p.gamma.clone(), p.beta.clone()],
        Box::new(move |g, needs| {
            let gv = gamma.values();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                for k in channel_iter(ch) {
                    dgamma[ch] += g[k] * xhat[k];
                    dbeta[ch] += g[k];
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                for ch in 0..c {
                    let s = gv[ch] * inv_std[ch];
                    if training {
                        // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
                        let mg = dbeta[ch] / count;
                        let mgx = dgamma[ch] / count;
                        for k in channel_iter(ch) {
                            dx[k] = s * (g[k] - mg - xhat[k] * mgx);
                        }
                    } else {
                        for k in channel_iter(ch) {
                            dx[k] = s * g[k];
                        }
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        }),
    ))
}

/// Softmax across the channel axis of [N,C,H,W].
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("softmax_channels")?;
    let plane = h * w;
    let xv = x.values();
    let mut out = vec![0.0; xv.len()];
    for i in 0..n {
        for pix in 0..plane {
            let idx = |ch: usize| (i * c + ch) * plane + pix;
            let m = (0..c).map(|ch| xv[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (xv[idx(ch)] - m).exp()).sum();
            for ch in 0..c {
                out[idx(ch)] = (xv[idx(ch)] - m).exp() / z;
            }
        }
    }
    let y = out.clone();
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        x.dtype(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for i in 0..n {
                for pix in 0..plane {
                    let idx = |ch: usize| (i * c + ch) * plane + pix;
                    let dot: f64 = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                    for ch in 0..c {
                        dx[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Reshapes a per-sample vector [N] (or [N,1]) to [N,1,1,1] for gating feature maps.
pub fn per_sample_gate(p: &Tensor) -> Result<Tensor> {
    reshape(p, &[p.numel(), 1, 1, 1])
}
