//! Convolution kernels: im2col lowering for 2D cross-correlation and a direct
//! loop for the channel-axis 1D convolution used by feature recalibration.

use rayon::prelude::*;

use super::{ConvParams, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<ConvGeometry> {
        if h + 2 * pad.0 < kh {
            return Err(Error::shape(
                "conv2d",
                format!("height {h} with padding {} is smaller than kernel height {kh}", pad.0),
            ));
        }
        if w + 2 * pad.1 < kw {
            return Err(Error::shape(
                "conv2d",
                format!("width {w} with padding {} is smaller than kernel width {kw}", pad.1),
            ));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad.0 - kh) / stride.0 + 1,
            w_out: (w + 2 * pad.1 - kw) / stride.1 + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Lowers one [C,H,W] image to a [C·Kh·Kw, H'·W'] column matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                        let line = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters column gradients back onto the image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            out_row.iter_mut().zip(b_row).for_each(|(o, &v)| *o += s * v);
        }
    }
}

/// out[k×n] += aᵀ · b where a is [m×k] and b is [m×n]
fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            out_row.iter_mut().zip(b_row).for_each(|(o, &v)| *o += s * v);
        }
    }
}

/// out[m×k] += a · bᵀ where a is [m×n] and b is [k×n]
fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// 2D cross-correlation (no kernel flip) of `x` [N,C_in,H,W] with `p`.
///
/// Output extents are `floor((H + 2·pad − K) / stride) + 1` per axis.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (n, c_in, h, w) = x.dims4("conv2d")?;
    let (c_out, wc_in, kh, kw) = p.weight.dims4("conv2d")?;
    if c_in != wc_in {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {c_in} do not match weight input channels {wc_in}"),
        ));
    }
    let g = ConvGeometry::new(c_in, h, w, kh, kw, p.stride, p.padding)?;
    let (plen, npos) = (g.patch_len(), g.positions());
    let weight = p.weight.clone();
    let bias = p.bias.clone();
    let xv = x.values();
    let wv = weight.values();

    let mut out = vec![0.0; n * c_out * npos];
    out.par_chunks_mut(c_out * npos)
        .enumerate()
        .for_each(|(i, o)| {
            let mut cols = vec![0.0; plen * npos];
            g.im2col(&xv[i * c_in * h * w..(i + 1) * c_in * h * w], &mut cols);
            matmul_acc(wv, &cols, o, c_out, plen, npos);
            if let Some(b) = &bias {
                for (co, chunk) in o.chunks_mut(npos).enumerate() {
                    let bv = b.values()[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        });

    let dtype = match &bias {
        Some(b) => x.dtype().promote(weight.dtype()).promote(b.dtype()),
        None => x.dtype().promote(weight.dtype()),
    };
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = &bias {
        parents.push(b.clone());
    }
    let xs = x.clone();
    Ok(Tensor::from_op(
        vec![n, c_out, g.h_out, g.w_out],
        dtype,
        out,
        parents,
        Box::new(move |grad, needs| {
            let xv = xs.values();
            let wv = weight.values();
            let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let gi = &grad[i * c_out * npos..(i + 1) * c_out * npos];
                    let dw = needs[1].then(|| {
                        let mut cols = vec![0.0; plen * npos];
                        g.im2col(&xv[i * c_in * h * w..(i + 1) * c_in * h * w], &mut cols);
                        let mut dw = vec![0.0; c_out * plen];
                        matmul_a_bt_acc(gi, &cols, &mut dw, c_out, plen, npos);
                        dw
                    });
                    let dx = needs[0].then(|| {
                        let mut dcols = vec![0.0; plen * npos];
                        matmul_at_b_acc(wv, gi, &mut dcols, c_out, plen, npos);
                        let mut dx = vec![0.0; c_in * h * w];
                        g.col2im(&dcols, &mut dx);
                        dx
                    });
                    (dx, dw)
                })
                .collect();

            let dx = needs[0].then(|| {
                per_sample
                    .iter()
                    .flat_map(|(dx, _)| dx.as_ref().expect("dx computed").iter().copied())
                    .collect()
            });
            // summed in sample order so results do not depend on scheduling
            let dw = needs[1].then(|| {
                let mut acc = vec![0.0; c_out * plen];
                for (_, dw) in &per_sample {
                    acc.iter_mut()
                        .zip(dw.as_ref().expect("dw computed"))
                        .for_each(|(a, b)| *a += b);
                }
                acc
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; c_out];
                    for i in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let s = (i * c_out + co) * npos;
                            *d += grad[s..s + npos].iter().sum::<f64>();
                        }
                    }
                    db
                });
                grads.push(db);
            }
            grads
        }),
    ))
}

/// 1D convolution along the channel axis of `v` [N,C] with an odd-length
/// kernel and zero padding of (k−1)/2, so the channel count is preserved.
pub fn conv1d_channel(v: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, c) = match v.shape() {
        &[n, c] => (n, c),
        s => return Err(Error::shape("conv1d_channel", format!("expected [N,C], got {s:?}"))),
    };
    if kernel.rank() != 1 {
        return Err(Error::shape(
            "conv1d_channel",
            format!("kernel must be rank 1, got {:?}", kernel.shape()),
        ));
    }
    let k = kernel.numel();
    if k % 2 == 0 {
        return Err(Error::invalid(format!("conv1d_channel: kernel size {k} must be odd")));
    }
    let r = (k / 2) as isize;
    let vv = v.values();
    let kv = kernel.values();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for (j, &kj) in kv.iter().enumerate() {
                let src = ch as isize + j as isize - r;
                if src >= 0 && (src as usize) < c {
                    acc += kj * vv[i * c + src as usize];
                }
            }
            out[i * c + ch] = acc;
        }
    }
    let (vs, ks) = (v.clone(), kernel.clone());
    Ok(Tensor::from_op(
        vec![n, c],
        v.dtype().promote(kernel.dtype()),
        out,
        vec![v.clone(), kernel.clone()],
        Box::new(move |g, needs| {
            let vv = vs.values();
            let kv = ks.values();
            let mut dv = needs[0].then(|| vec![0.0; n * c]);
            let mut dk = needs[1].then(|| vec![0.0; k]);
            for i in 0..n {
                for ch in 0..c {
                    let go = g[i * c + ch];
                    for (j, &kj) in kv.iter().enumerate() {
                        let src = ch as isize + j as isize - r;
                        if src >= 0 && (src as usize) < c {
                            let idx = i * c + src as usize;
                            if let Some(dv) = dv.as_mut() {
                                dv[idx] += kj * go;
                            }
                            if let Some(dk) = dk.as_mut() {
                                dk[j] += vv[idx] * go;
                            }
                        }
                    }
                }
            }
            vec![dv, dk]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Quadruple-loop cross-correlation, independent of the im2col path.
    fn conv_oracle(x: &Tensor, p: &ConvParams) -> Vec<f64> {
        let (n, ci, h, w) = x.dims4("o").unwrap();
        let (co, _, kh, kw) = p.weight.dims4("o").unwrap();
        let (sh, sw) = p.stride;
        let (ph, pw) = p.padding;
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;
        let xv = x.values();
        let wv = p.weight.values();
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = p.bias.as_ref().map_or(0.0, |b| b.values()[o]);
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * sh + ky) as isize - ph as isize;
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xv[((b * ci + c) * h + iy as usize) * w + ix as usize]
                                        * wv[((o * ci + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_affine() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let p = ConvParams::new(
            Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap(),
            Some(Tensor::new(&[1], vec![1.0]).unwrap()),
            (1, 1),
            (0, 0),
        )
        .unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().values(), &[7.0]);
    }

    #[test]
    fn centered_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 1, 5, 6], 1.0, DType::F64, &mut rng);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let p = ConvParams::new(Tensor::new(&[1, 1, 3, 3], k).unwrap(), None, (1, 1), (1, 1)).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn random_4x4_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 1, 4, 4], 1.0, DType::F64, &mut rng);
        let wt = Tensor::randn(&[1, 1, 2, 2], 1.0, DType::F64, &mut rng);
        let p = ConvParams::new(wt, None, (1, 1), (0, 0)).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let oracle = conv_oracle(&x, &p);
        for (a, b) in y.values().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn strided_padded_multichannel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, kh, kw) in &[((2, 2), (1, 1), 3, 3), ((1, 2), (0, 2), 1, 5), ((2, 1), (2, 0), 5, 1)] {
            let x = Tensor::randn(&[2, 3, 7, 6], 1.0, DType::F64, &mut rng);
            let wt = Tensor::randn(&[4, 3, kh, kw], 1.0, DType::F64, &mut rng);
            let b = Tensor::randn(&[4], 1.0, DType::F64, &mut rng);
            let p = ConvParams::new(wt, Some(b), stride, pad).unwrap();
            let y = conv2d(&x, &p).unwrap();
            let oracle = conv_oracle(&x, &p);
            for (a, b) in y.values().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let x = Tensor::zeros(&[1, 2, 4, 4], DType::F64);
        let p = ConvParams::new(Tensor::zeros(&[1, 3, 1, 1], DType::F64), None, (1, 1), (0, 0)).unwrap();
        let err = conv2d(&x, &p).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let p = ConvParams::new(Tensor::zeros(&[1, 2, 5, 1], DType::F64), None, (1, 1), (0, 0)).unwrap();
        let err = conv2d(&x, &p).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn conv1d_identity_and_box() {
        let v = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = conv1d_channel(&v, &Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        assert!(id.bit_eq(&v));

        let c = Tensor::new(&[1, 5], vec![3.0; 5]).unwrap();
        let k = Tensor::new(&[3], vec![1.0 / 3.0; 3]).unwrap();
        let y = conv1d_channel(&c, &k).unwrap();
        let v = y.values();
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[4] - 2.0).abs() < 1e-12);
        for &m in &v[1..4] {
            assert!((m - 3.0).abs() < 1e-12);
        }
        assert!(conv1d_channel(&c, &Tensor::new(&[2], vec![1.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn conv1d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::randn(&[2, 8], 1.0, DType::F64, &mut rng);
        let k = Tensor::randn(&[3], 1.0, DType::F64, &mut rng);
        let y = conv1d_channel(&v, &k).unwrap();
        let (vv, kv) = (v.values(), k.values());
        for i in 0..2 {
            for c in 0..8 {
                let left = if c > 0 { vv[i * 8 + c - 1] } else { 0.0 };
                let right = if c < 7 { vv[i * 8 + c + 1] } else { 0.0 };
                let expect = kv[0] * left + kv[1] * vv[i * 8 + c] + kv[2] * right;
                assert!((y.values()[i * 8 + c] - expect).abs() < 1e-12);
            }
        }
    }
}
