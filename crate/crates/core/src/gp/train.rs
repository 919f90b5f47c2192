//! Marginal-likelihood hyperparameter optimization: multi-start Adam in
//! log-hyperparameter space with analytic gradients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernel::{kernel_dq, kernel_value, KernelHyperparams, KernelKind};
use crate::error::Result;
use crate::rng::substream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub n_restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Pin the noise variance instead of optimizing it (used by the BO
    /// surrogate, whose observations carry a known small noise).
    pub fixed_noise: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { n_restarts: 4, steps: 160, learning_rate: 0.08, fixed_noise: None }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHyperparams {
    pub hyperparams: KernelHyperparams,
    pub lml: f64,
    /// Set when no restart improved on its best initial point.
    pub warning: bool,
}

/// Log marginal likelihood of `outputs` under `h`, via the triangular factor.
pub fn log_marginal_likelihood(
    inputs: &DMatrix<f64>,
    outputs: &DVector<f64>,
    h: &KernelHyperparams,
) -> Result<f64> {
    super::lml_of(inputs, outputs, h)
}

/// Log-space parameter vector: [ln l_1.., ln sf2, (ln sn2)].
fn unpack(z: &[f64], dim: usize, kind: KernelKind, fixed_noise: Option<f64>) -> KernelHyperparams {
    let lengthscales = DVector::from_fn(dim, |i, _| z[i].exp());
    let sf2 = z[dim].exp();
    let sn2 = fixed_noise.unwrap_or_else(|| z[dim + 1].exp());
    KernelHyperparams { lengthscales, signal_variance: sf2, noise_variance: sn2, kind }
}

/// LML and its gradient in log space. Returns None when the factorization
/// fails outright (the optimizer treats the point as unusable).
fn lml_and_grad(
    xt: &DMatrix<f64>,
    y: &DVector<f64>,
    kind: KernelKind,
    z: &[f64],
    dim: usize,
    fixed_noise: Option<f64>,
) -> Option<(f64, Vec<f64>)> {
    let n = xt.ncols();
    let h = unpack(z, dim, kind, fixed_noise);
    let ls = h.lengthscales.as_slice();

    // Scaled squared distances and the noise-free kernel matrix.
    let mut q = DMatrix::zeros(n, n);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let a = xt.column(i);
        for j in 0..=i {
            let b = xt.column(j);
            let mut qq = 0.0;
            for d in 0..dim {
                let dd = (a[d] - b[d]) / ls[d];
                qq += dd * dd;
            }
            let kk = kernel_value(kind, h.signal_variance, qq);
            q[(i, j)] = qq;
            q[(j, i)] = qq;
            k[(i, j)] = kk;
            k[(j, i)] = kk;
        }
    }

    let jitter = 1e-8 * h.signal_variance;
    let mut ky = k.clone();
    for i in 0..n {
        ky[(i, i)] += h.noise_variance + jitter;
    }
    let chol = nalgebra::linalg::Cholesky::new(ky)?;
    let alpha = chol.solve(y);
    let kinv = chol.inverse();
    let lml = -0.5
        * (y.dot(&alpha)
            + 2.0 * (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>()
            + n as f64 * (2.0 * std::f64::consts::PI).ln());
    if !lml.is_finite() {
        return None;
    }

    // A = alpha alpha^T - Kinv; dL/dtheta = 0.5 * sum(A .* dK/dtheta).
    let mut grad = vec![0.0; z.len()];
    for i in 0..n {
        for j in 0..n {
            let a_ij = alpha[i] * alpha[j] - kinv[(i, j)];
            let dq = kernel_dq(kind, h.signal_variance, q[(i, j)]);
            for d in 0..dim {
                let delta = xt[(d, i)] - xt[(d, j)];
                // dq/d(ln l_d) = -2 delta^2 / l_d^2
                let dk = dq * (-2.0 * delta * delta / (ls[d] * ls[d]));
                grad[d] += 0.5 * a_ij * dk;
            }
            // k scales linearly with sf2, so dK/d(ln sf2) = K.
            grad[dim] += 0.5 * a_ij * k[(i, j)];
        }
    }
    if fixed_noise.is_none() {
        let tr_a: f64 = (0..n).map(|i| alpha[i] * alpha[i] - kinv[(i, i)]).sum();
        grad[dim + 1] = 0.5 * tr_a * h.noise_variance;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    Some((lml, grad))
}

/// Maximize the marginal likelihood over `n_restarts` Adam trajectories,
/// returning the best hyperparameters seen (initial points included).
pub fn train_gp(
    inputs: &DMatrix<f64>,
    outputs: &DVector<f64>,
    kind: KernelKind,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainedHyperparams> {
    assert!(opts.n_restarts >= 1, "need at least one restart");
    assert!(inputs.nrows() >= 2, "need at least two rows");
    let dim = inputs.ncols();
    let n = inputs.nrows();
    let xt = inputs.transpose();

    let col_std: Vec<f64> = (0..dim)
        .map(|d| {
            let mu = inputs.column(d).sum() / n as f64;
            let var = inputs.column(d).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            var.sqrt().max(1e-6)
        })
        .collect();
    let y_mu = outputs.sum() / n as f64;
    let y_var = (outputs.iter().map(|v| (v - y_mu).powi(2)).sum::<f64>() / n as f64).max(1e-12);

    let n_params = dim + if opts.fixed_noise.is_some() { 1 } else { 2 };
    let mut rng = substream(seed, 0);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut best_init = f64::NEG_INFINITY;

    for restart in 0..opts.n_restarts {
        let mut z = vec![0.0; n_params];
        if restart == 0 {
            for d in 0..dim {
                z[d] = col_std[d].ln();
            }
            z[dim] = y_var.ln();
            if opts.fixed_noise.is_none() {
                z[dim + 1] = (1e-2 * y_var).ln();
            }
        } else {
            for d in 0..dim {
                z[d] = (col_std[d] * 10f64.powf(rng.gen_range(-1.0..1.0))).ln();
            }
            z[dim] = (y_var * 10f64.powf(rng.gen_range(-1.0..1.0))).ln();
            if opts.fixed_noise.is_none() {
                z[dim + 1] = (y_var * 10f64.powf(rng.gen_range(-4.0..-1.0))).ln();
            }
        }

        let mut m = vec![0.0; n_params];
        let mut v = vec![0.0; n_params];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut evaluated_init = false;
        for step in 0..=opts.steps {
            let Some((lml, grad)) = lml_and_grad(&xt, outputs, kind, &z, dim, opts.fixed_noise)
            else {
                break;
            };
            if !evaluated_init {
                best_init = best_init.max(lml);
                evaluated_init = true;
            }
            if best.as_ref().map_or(true, |(b, _)| lml > *b) {
                best = Some((lml, z.clone()));
            }
            if step == opts.steps {
                break;
            }
            let t = (step + 1) as f64;
            for p in 0..n_params {
                m[p] = b1 * m[p] + (1.0 - b1) * grad[p];
                v[p] = b2 * v[p] + (1.0 - b2) * grad[p] * grad[p];
                let mh = m[p] / (1.0 - b1.powf(t));
                let vh = v[p] / (1.0 - b2.powf(t));
                // ascent
                z[p] += opts.learning_rate * mh / (vh.sqrt() + eps);
            }
        }
    }

    let (lml, z) = best.expect("all restarts failed to produce a finite likelihood");
    let warning = lml <= best_init + 1e-9;
    Ok(TrainedHyperparams {
        hyperparams: unpack(&z, dim, kind, opts.fixed_noise),
        lml,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GpModel;
    use rand::Rng;

    /// Sample y from a known RBF GP prior (plus observation noise).
    fn sample_gp(n: usize, l: f64, sf2: f64, sn2: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = substream(seed, 7);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-3.0..3.0));
        let h = KernelHyperparams::new(DVector::from_element(1, l), sf2, 0.0, KernelKind::Rbf).unwrap();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let d: f64 = x[(i, 0)] - x[(j, 0)];
                k[(i, j)] = kernel_value(h.kind, sf2, (d / l).powi(2));
            }
        }
        for i in 0..n {
            k[(i, i)] += 1e-10;
        }
        let chol = nalgebra::linalg::Cholesky::new(k).unwrap();
        let eps = DVector::from_fn(n, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let y = chol.l() * eps
            + DVector::from_fn(n, |_, _| {
                let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                e * sn2.sqrt()
            });
        (x, y)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = sample_gp(20, 0.8, 1.2, 0.05, 1);
        let xt = x.transpose();
        for kind in [KernelKind::Rbf, KernelKind::Matern52] {
            // dim=1: [ln l, ln sf2, ln sn2]
            let z = vec![0.3, -0.2, -2.5];
            let (_, grad) = lml_and_grad(&xt, &y, kind, &z, 1, None).unwrap();
            for p in 0..3 {
                let h = 1e-6;
                let mut zp = z.clone();
                zp[p] += h;
                let (lp, _) = lml_and_grad(&xt, &y, kind, &zp, 1, None).unwrap();
                let mut zm = z.clone();
                zm[p] -= h;
                let (lm, _) = lml_and_grad(&xt, &y, kind, &zm, 1, None).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (grad[p] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "{kind:?} param {p}: analytic {} vs fd {fd}",
                    grad[p]
                );
            }
        }
    }

    #[test]
    fn recovers_known_hyperparameters() {
        let (x, y) = sample_gp(50, 1.0, 1.0, 0.01, 42);
        let opts = TrainOptions { n_restarts: 4, steps: 200, ..TrainOptions::default() };
        let fit = train_gp(&x, &y, KernelKind::Rbf, &opts, 5).unwrap();
        let h = &fit.hyperparams;
        assert!(h.lengthscales[0].ln().abs() <= 0.5, "lengthscale {}", h.lengthscales[0]);
        assert!(h.signal_variance.ln().abs() <= 0.5 + 0.3, "sf2 {}", h.signal_variance);
        assert!((h.noise_variance.ln() - 0.01_f64.ln()).abs() <= 1.0, "sn2 {}", h.noise_variance);
    }

    #[test]
    fn deterministic_given_seed_and_improves_on_init() {
        let (x, y) = sample_gp(25, 0.7, 1.4, 0.02, 8);
        let opts = TrainOptions { n_restarts: 2, steps: 80, ..TrainOptions::default() };
        let a = train_gp(&x, &y, KernelKind::Matern52, &opts, 3).unwrap();
        let b = train_gp(&x, &y, KernelKind::Matern52, &opts, 3).unwrap();
        assert_eq!(a.hyperparams.lengthscales, b.hyperparams.lengthscales);
        assert_eq!(a.hyperparams.signal_variance, b.hyperparams.signal_variance);
        assert_eq!(a.hyperparams.noise_variance, b.hyperparams.noise_variance);
        assert!(!a.warning, "expected the optimizer to beat its initial point");

        // Returned likelihood is at least the likelihood of the heuristic
        // initial point (restart 0).
        let n = x.nrows() as f64;
        let mu = x.column(0).sum() / n;
        let std0 = (x.column(0).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        let ymu = y.sum() / n;
        let yvar = y.iter().map(|v| (v - ymu).powi(2)).sum::<f64>() / n;
        let init = KernelHyperparams::new(
            DVector::from_element(1, std0),
            yvar,
            1e-2 * yvar,
            KernelKind::Matern52,
        )
        .unwrap();
        let init_lml = log_marginal_likelihood(&x, &y, &init).unwrap();
        assert!(a.lml >= init_lml - 1e-9);
        let refit = GpModel::fit(x.clone(), y.clone(), a.hyperparams.clone()).unwrap();
        assert!((refit.log_marginal_likelihood() - a.lml).abs() < 1e-6);
    }
}
