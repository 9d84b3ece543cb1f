//! Learnable parameter bundles for convolutions, batch normalization and
//! fully-connected layers, plus the visitor trait used to enumerate them.

use std::sync::RwLock;

use rand::Rng;

use super::{DType, Tensor};
use crate::error::{Error, Result};

/// Whether a named tensor is trained by the optimizer or is running state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Param,
    Buffer,
}

/// Anything holding named tensors: layers, blocks, whole models.
///
/// Both visitors must yield the same names in the same order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role));

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, _| out.push((name.to_string(), t.clone())));
        out
    }

    /// Number of trainable scalars (running statistics excluded).
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, role| {
            if role == Role::Param {
                n += t.numel();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight [C_out, C_in, K_h, K_w], optional bias [C_out], stride and zero padding.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<ConvParams> {
        let (c_out, _, _, _) = weight.dims4("ConvParams")?;
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(
                    "ConvParams",
                    format!("bias shape {:?} does not match C_out = {c_out}", b.shape()),
                ));
            }
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("ConvParams: stride must be positive"));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He-normal initialised, trainable convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn kaiming<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
        dtype: DType,
        rng: &mut R,
    ) -> ConvParams {
        let fan_in = (c_in * kernel.0 * kernel.1) as f64;
        let weight = Tensor::randn(&[c_out, c_in, kernel.0, kernel.1], (2.0 / fan_in).sqrt(), dtype, rng).tracked();
        let bias = bias.then(|| Tensor::zeros(&[c_out], dtype).tracked());
        ConvParams {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Stride-1 convolution whose padding keeps the spatial extents.
    pub fn same<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize),
        bias: bool,
        dtype: DType,
        rng: &mut R,
    ) -> ConvParams {
        ConvParams::kaiming(c_out, c_in, kernel, (1, 1), (kernel.0 / 2, kernel.1 / 2), bias, dtype, rng)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }
}

impl Parameters for ConvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(&join(prefix, "weight"), &self.weight, Role::Param);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, Role::Param);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        f(&join(prefix, "weight"), &mut self.weight, Role::Param);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, Role::Param);
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Batch normalization: y = γ·(x − μ)/√(σ² + eps) + β.
///
/// Running statistics sit behind a lock so that a training-mode forward pass
/// can update them through a shared reference.
#[derive(Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    running: RwLock<RunningStats>,
    pub eps: f64,
    pub momentum: f64,
}

impl Clone for BatchNormParams {
    fn clone(&self) -> Self {
        BatchNormParams {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running: RwLock::new(self.running()),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

impl BatchNormParams {
    /// Validates lengths, non-negative variances, `eps ≥ 0` and momentum in (0,1).
    pub fn new(
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        eps: f64,
        momentum: f64,
    ) -> Result<BatchNormParams> {
        let c = gamma.numel();
        for (name, t) in [("gamma", &gamma), ("beta", &beta), ("running_mean", &running_mean), ("running_var", &running_var)] {
            if t.shape() != [c] {
                return Err(Error::shape(
                    "BatchNormParams",
                    format!("{name} has shape {:?}, expected [{c}]", t.shape()),
                ));
            }
        }
        if running_var.values().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("BatchNormParams: running_var must be non-negative"));
        }
        if !(eps >= 0.0) {
            return Err(Error::invalid(format!("BatchNormParams: eps must be non-negative, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::invalid(format!("BatchNormParams: momentum must be in (0,1), got {momentum}")));
        }
        Ok(BatchNormParams {
            gamma,
            beta,
            running: RwLock::new(RunningStats {
                mean: running_mean,
                var: running_var,
            }),
            eps,
            momentum,
        })
    }

    /// Fresh trainable layer: γ = 1, β = 0, μ = 0, σ² = 1.
    pub fn init(c: usize, dtype: DType) -> BatchNormParams {
        BatchNormParams::new(
            Tensor::ones(&[c], dtype).tracked(),
            Tensor::zeros(&[c], dtype).tracked(),
            Tensor::zeros(&[c], dtype),
            Tensor::ones(&[c], dtype),
            DEFAULT_BN_EPS,
            DEFAULT_BN_MOMENTUM,
        )
        .expect("valid by construction")
    }

    /// Exact identity map in inference mode (γ = 1, β = 0, μ = 0, σ² = 1, eps = 0).
    pub fn identity(c: usize, dtype: DType) -> BatchNormParams {
        let mut bn = BatchNormParams::init(c, dtype);
        bn.eps = 0.0;
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running(&self) -> RunningStats {
        self.running.read().expect("bn lock poisoned").clone()
    }

    pub fn running_mean(&self) -> Tensor {
        self.running().mean
    }

    pub fn running_var(&self) -> Tensor {
        self.running().var
    }

    pub fn set_running(&self, mean: Tensor, var: Tensor) {
        *self.running.write().expect("bn lock poisoned") = RunningStats { mean, var };
    }

    /// Per-channel scale γ/√(σ² + eps) and shift β − μ·scale under running statistics.
    pub fn inference_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let r = self.running();
        let scale: Vec<f64> = self
            .gamma
            .values()
            .iter()
            .zip(r.var.values())
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .values()
            .iter()
            .zip(r.mean.values())
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

impl Parameters for BatchNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(&join(prefix, "gamma"), &self.gamma, Role::Param);
        f(&join(prefix, "beta"), &self.beta, Role::Param);
        let r = self.running.read().expect("bn lock poisoned");
        f(&join(prefix, "running_mean"), &r.mean, Role::Buffer);
        f(&join(prefix, "running_var"), &r.var, Role::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        f(&join(prefix, "gamma"), &mut self.gamma, Role::Param);
        f(&join(prefix, "beta"), &mut self.beta, Role::Param);
        let r = self.running.get_mut().expect("bn lock poisoned");
        f(&join(prefix, "running_mean"), &mut r.mean, Role::Buffer);
        f(&join(prefix, "running_var"), &mut r.var, Role::Buffer);
    }
}

/// Fully-connected layer: weight [out, in], bias [out].
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<LinearParams> {
        match weight.shape() {
            &[out, _] if bias.shape() == [out] => Ok(LinearParams { weight, bias }),
            s => Err(Error::shape(
                "LinearParams",
                format!("weight {s:?} incompatible with bias {:?}", bias.shape()),
            )),
        }
    }

    pub fn kaiming<R: Rng + ?Sized>(out: usize, inp: usize, dtype: DType, rng: &mut R) -> LinearParams {
        LinearParams {
            weight: Tensor::randn(&[out, inp], (2.0 / inp as f64).sqrt(), dtype, rng).tracked(),
            bias: Tensor::zeros(&[out], dtype).tracked(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Parameters for LinearParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(&join(prefix, "weight"), &self.weight, Role::Param);
        f(&join(prefix, "bias"), &self.bias, Role::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        f(&join(prefix, "weight"), &mut self.weight, Role::Param);
        f(&join(prefix, "bias"), &mut self.bias, Role::Param);
    }
}
