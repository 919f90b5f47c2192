//! Stationary anisotropic covariance functions and their log-space
//! hyperparameter gradients.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Matern52,
}

/// Per-output kernel hyperparameters. `lengthscales` are in input units;
/// the scaled squared distance is sum((a_d - b_d)^2 / l_d^2).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub lengthscales: DVector<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub kind: KernelKind,
}

impl KernelHyperparams {
    pub fn new(
        lengthscales: DVector<f64>,
        signal_variance: f64,
        noise_variance: f64,
        kind: KernelKind,
    ) -> Result<Self> {
        if lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(CoreError::InvalidArgument(
                "lengthscales must be strictly positive".into(),
            ));
        }
        if !(signal_variance > 0.0) {
            return Err(CoreError::InvalidArgument(
                "signal variance must be strictly positive".into(),
            ));
        }
        if !(noise_variance >= 0.0) {
            return Err(CoreError::InvalidArgument(
                "noise variance must be nonnegative".into(),
            ));
        }
        Ok(KernelHyperparams {
            lengthscales,
            signal_variance,
            noise_variance,
            kind,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }
}

#[inline]
fn scaled_sq_dist(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let mut q = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / ls[i];
        q += d * d;
    }
    q
}

#[inline]
pub(crate) fn kernel_value(kind: KernelKind, sf2: f64, q: f64) -> f64 {
    match kind {
        KernelKind::Rbf => sf2 * (-q).exp(),
        KernelKind::Matern52 => {
            let r = q.sqrt();
            let s5r = 5.0_f64.sqrt() * r;
            sf2 * (1.0 + s5r + 5.0 * q / 3.0) * (-s5r).exp()
        }
    }
}

/// d k / d q at scaled squared distance q (smooth at q = 0 for both kinds).
#[inline]
pub(crate) fn kernel_dq(kind: KernelKind, sf2: f64, q: f64) -> f64 {
    match kind {
        KernelKind::Rbf => -sf2 * (-q).exp(),
        KernelKind::Matern52 => {
            let r = q.sqrt();
            let s5r = 5.0_f64.sqrt() * r;
            -(5.0 / 6.0) * sf2 * (1.0 + s5r) * (-s5r).exp()
        }
    }
}

/// Covariance between two points given raw slices (hot path).
#[inline]
pub(crate) fn kernel_eval_slices(
    kind: KernelKind,
    sf2: f64,
    ls: &[f64],
    a: &[f64],
    b: &[f64],
) -> f64 {
    kernel_value(kind, sf2, scaled_sq_dist(a, b, ls))
}

/// Covariance k(a, b) under `h`, validating dimensions.
pub fn kernel_eval(a: &DVector<f64>, b: &DVector<f64>, h: &KernelHyperparams) -> Result<f64> {
    let d = h.input_dim();
    if a.len() != d || b.len() != d {
        return Err(CoreError::DimensionMismatch(format!(
            "kernel inputs have lengths {} and {}, hyperparams expect {}",
            a.len(),
            b.len(),
            d
        )));
    }
    if h.lengthscales.iter().any(|&l| !(l > 0.0)) {
        return Err(CoreError::InvalidArgument(
            "lengthscales must be strictly positive".into(),
        ));
    }
    Ok(kernel_eval_slices(
        h.kind,
        h.signal_variance,
        h.lengthscales.as_slice(),
        a.as_slice(),
        b.as_slice(),
    ))
}
