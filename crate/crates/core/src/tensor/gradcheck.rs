//! Central finite differences, used to check analytic gradients.
//!
//! Errors are reported per input tensor as ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂),
//! which stays meaningful when individual entries are near zero.

use super::Tensor;
use crate::error::Result;

/// Relative error between two gradient vectors; two (near-)zero vectors agree.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// d f / d x by central differences with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Analytic and numeric gradients of one input.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl Comparison {
    pub fn relative_error(&self) -> f64 {
        relative_error(&self.analytic, &self.numeric)
    }

    /// Largest entry-wise absolute difference.
    pub fn max_abs_error(&self) -> f64 {
        self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max)
    }

    /// ‖analytic − numeric‖₂.
    pub fn error_norm(&self) -> f64 {
        self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt()
    }

    /// Relative error with the denominator floored at `floor`, for gradients
    /// that vanish below finite-difference resolution.
    pub fn relative_error_floored(&self, floor: f64) -> f64 {
        self.error_norm() / self.scale().max(floor)
    }

    /// Larger of the two gradient norms.
    pub fn scale(&self) -> f64 {
        norm(&self.analytic).max(norm(&self.numeric))
    }
}

/// Compares backward-pass gradients of the scalar `f(inputs)` against central
/// differences, returning one relative error per input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    Ok(compare(inputs, h, f)?.iter().map(Comparison::relative_error).collect())
}

/// Both gradients for every input of the scalar `f(inputs)`.
pub fn compare<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<Comparison>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::tracked).collect();
    f(&leaves)?.backward()?;

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut failure = None;
        let numeric = central_difference(inputs[i].values(), h, |probe| {
            let mut args: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
            args[i] = Tensor::with_dtype(inputs[i].shape(), probe.to_vec(), inputs[i].dtype())
                .expect("probe keeps the shape");
            match f(&args) {
                Ok(v) => v.item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        errors.push(Comparison { analytic, numeric });
    }
    Ok(errors)
}
