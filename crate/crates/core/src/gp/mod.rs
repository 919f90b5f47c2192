//! Single-output Gaussian-process regression and the diagonal-covariance
//! state-space model built from one GP per state dimension.

mod kernel;
mod train;

pub use kernel::{kernel_eval, KernelHyperparams, KernelKind};
pub use train::{log_marginal_likelihood, train_gp, TrainOptions, TrainedHyperparams};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
pub(crate) use kernel::kernel_eval_slices;

/// Rows of (state ‖ control, next state) pairs used to fit the model.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// N×(n_x + n_u); row i is [x_i^T u_i^T].
    pub inputs: DMatrix<f64>,
    /// N×n_x; row i is the observed next state.
    pub outputs: DMatrix<f64>,
    pub n_x: usize,
    pub n_u: usize,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>, n_x: usize, n_u: usize) -> Result<Self> {
        if inputs.nrows() != outputs.nrows() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} input rows vs {} output rows",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        if inputs.ncols() != n_x + n_u || outputs.ncols() != n_x {
            return Err(CoreError::DimensionMismatch(
                "column counts disagree with n_x/n_u".into(),
            ));
        }
        if inputs.iter().chain(outputs.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("dataset entries".into()));
        }
        Ok(Dataset { inputs, outputs, n_x, n_u })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with header `x1..x{n_x},u1..u{n_u},y1..y{n_x}`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = Vec::new();
        for i in 1..=self.n_x {
            header.push(format!("x{i}"));
        }
        for i in 1..=self.n_u {
            header.push(format!("u{i}"));
        }
        for i in 1..=self.n_x {
            header.push(format!("y{i}"));
        }
        wtr.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = Vec::with_capacity(self.n_x * 2 + self.n_u);
            for c in 0..self.inputs.ncols() {
                rec.push(format!("{:.17e}", self.inputs[(r, c)]));
            }
            for c in 0..self.n_x {
                rec.push(format!("{:.17e}", self.outputs[(r, c)]));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let n_x = header.iter().filter(|h| h.starts_with('x')).count();
        let n_u = header.iter().filter(|h| h.starts_with('u')).count();
        let n_y = header.iter().filter(|h| h.starts_with('y')).count();
        if n_x == 0 || n_x != n_y {
            return Err(CoreError::InvalidArgument(format!(
                "unexpected dataset header: {header:?}"
            )));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CoreError::InvalidArgument(format!("bad csv number: {e}")))?;
            if vals.len() != n_x + n_u + n_y {
                return Err(CoreError::DimensionMismatch("csv row width".into()));
            }
            inputs.extend_from_slice(&vals[..n_x + n_u]);
            outputs.extend_from_slice(&vals[n_x + n_u..]);
            rows += 1;
        }
        Dataset::new(
            DMatrix::from_row_slice(rows, n_x + n_u, &inputs),
            DMatrix::from_row_slice(rows, n_x, &outputs),
            n_x,
            n_u,
        )
    }
}

/// Column-wise zero-mean unit-variance scaler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl StandardScaler {
    pub fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows().max(1) as f64;
        let mean = DVector::from_fn(m.ncols(), |c, _| m.column(c).sum() / n);
        let std = DVector::from_fn(m.ncols(), |c, _| {
            let mu = mean[c];
            let var = m.column(c).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-12)
        });
        StandardScaler { mean, std }
    }

    pub fn transform_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| (v[i] - self.mean[i]) / self.std[i])
    }

    pub fn transform_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
            (m[(r, c)] - self.mean[c]) / self.std[c]
        })
    }
}

/// In-place forward substitution with the leading n×n block of `l`.
pub(crate) fn solve_lower_in_place(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let mut s = x[i];
        for (j, xv) in x.iter().enumerate().take(i) {
            s -= l[(i, j)] * xv;
        }
        x[i] = s / l[(i, i)];
    }
}

/// Backward substitution with L^T (solves L^T x = b for lower-triangular L).
pub(crate) fn solve_lower_transpose_in_place(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = x.len();
    for i in (0..n).rev() {
        let mut s = x[i];
        for (j, xv) in x.iter().enumerate().skip(i + 1).take(n - i - 1) {
            s -= l[(j, i)] * xv;
        }
        x[i] = s / l[(i, i)];
    }
}

/// Gram matrix of the points stored column-wise in `pts_t`.
fn gram(pts_t: &DMatrix<f64>, h: &KernelHyperparams) -> DMatrix<f64> {
    let n = pts_t.ncols();
    let ls = h.lengthscales.as_slice();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let a = pts_t.column(i);
        for j in 0..=i {
            let v = kernel_eval_slices(h.kind, h.signal_variance, ls, a.as_slice(), pts_t.column(j).as_slice());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with jitter escalation. Returns (lower factor, jitter used).
pub(crate) fn chol_with_jitter(
    k: &DMatrix<f64>,
    noise_variance: f64,
    signal_variance: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let mut jitter = 1e-8 * signal_variance;
    let max_jitter = 1e-2 * signal_variance;
    loop {
        let mut ky = k.clone();
        for i in 0..ky.nrows() {
            ky[(i, i)] += noise_variance + jitter;
        }
        if let Some(ch) = nalgebra::linalg::Cholesky::new(ky) {
            return Ok((ch.unpack(), jitter));
        }
        if jitter >= max_jitter {
            return Err(CoreError::SingularKernel { jitter });
        }
        jitter *= 10.0;
    }
}

/// One trained single-output GP with cached triangular factor.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyperparams: KernelHyperparams,
    /// N×n_v, row per training point (kept for serialization/debug).
    pub train_inputs: DMatrix<f64>,
    pub train_outputs: DVector<f64>,
    /// n_v×N transposed copy; contiguous point access on the hot path.
    inputs_t: DMatrix<f64>,
    /// Lower factor of (K + sigma_n^2 I + jitter I).
    factor: DMatrix<f64>,
    /// (K + sigma_n^2 I)^{-1} y.
    alpha: DVector<f64>,
    /// L^{-1} y.
    beta: DVector<f64>,
    pub jitter: f64,
}

impl GpModel {
    pub fn fit(
        train_inputs: DMatrix<f64>,
        train_outputs: DVector<f64>,
        hyperparams: KernelHyperparams,
    ) -> Result<Self> {
        if train_inputs.nrows() != train_outputs.len() {
            return Err(CoreError::DimensionMismatch("training rows vs outputs".into()));
        }
        if train_inputs.ncols() != hyperparams.input_dim() {
            return Err(CoreError::DimensionMismatch("input dim vs lengthscales".into()));
        }
        let inputs_t = train_inputs.transpose();
        let k = gram(&inputs_t, &hyperparams);
        let (factor, jitter) =
            chol_with_jitter(&k, hyperparams.noise_variance, hyperparams.signal_variance)?;
        let mut beta = train_outputs.as_slice().to_vec();
        solve_lower_in_place(&factor, &mut beta);
        let mut alpha = beta.clone();
        solve_lower_transpose_in_place(&factor, &mut alpha);
        Ok(GpModel {
            hyperparams,
            train_inputs,
            train_outputs,
            inputs_t,
            factor,
            alpha: DVector::from_vec(alpha),
            beta: DVector::from_vec(beta),
            jitter,
        })
    }

    pub fn len(&self) -> usize {
        self.train_outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub(crate) fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub(crate) fn inputs_t(&self) -> &DMatrix<f64> {
        &self.inputs_t
    }

    /// Covariances of `q` with every training point.
    pub(crate) fn kernel_col(&self, q: &[f64]) -> Vec<f64> {
        let h = &self.hyperparams;
        let ls = h.lengthscales.as_slice();
        (0..self.len())
            .map(|i| {
                kernel_eval_slices(h.kind, h.signal_variance, ls, q, self.inputs_t.column(i).as_slice())
            })
            .collect()
    }

    /// Posterior mean and variance at `query` (variance clamped at 0).
    pub fn posterior(&self, query: &DVector<f64>) -> Result<(f64, f64)> {
        if query.len() != self.hyperparams.input_dim() {
            return Err(CoreError::DimensionMismatch("posterior query dim".into()));
        }
        let kstar = self.kernel_col(query.as_slice());
        let mean = kstar
            .iter()
            .zip(self.alpha.iter())
            .map(|(k, a)| k * a)
            .sum::<f64>();
        let mut v = kstar;
        solve_lower_in_place(&self.factor, &mut v);
        let kss = self.hyperparams.signal_variance;
        let var = kss - v.iter().map(|x| x * x).sum::<f64>();
        Ok((mean, var.max(0.0)))
    }

    /// Log marginal likelihood of the training data under the cached factor.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let data = self.train_outputs.dot(&self.alpha);
        let logdet = 2.0 * (0..self.len()).map(|i| self.factor[(i, i)].ln()).sum::<f64>();
        -0.5 * (data + logdet + n * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Bank of n_x independent GPs predicting the next state with diagonal
/// covariance; standardizes inputs/outputs around the training data.
#[derive(Debug, Clone)]
pub struct GpStateSpaceModel {
    pub models: Vec<GpModel>,
    pub input_scaler: StandardScaler,
    pub output_scaler: StandardScaler,
    pub n_x: usize,
    pub n_u: usize,
}

/// Portable description of a trained state-space model: hyperparameters,
/// standardization statistics and a reference to the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsmSpec {
    pub hyperparams: Vec<KernelHyperparams>,
    pub input_scaler: StandardScaler,
    pub output_scaler: StandardScaler,
    pub n_x: usize,
    pub n_u: usize,
    pub data_ref: String,
    pub data_rows: usize,
    pub log_marginal_likelihoods: Vec<f64>,
}

impl GpStateSpaceModel {
    /// Train one GP per state dimension on the standardized dataset.
    /// The per-state trainings run in parallel.
    pub fn train(
        data: &Dataset,
        kind: KernelKind,
        opts: &TrainOptions,
        seed: u64,
    ) -> Result<Self> {
        use rayon::prelude::*;
        if data.len() < 2 {
            return Err(CoreError::InvalidArgument("need at least 2 rows to train".into()));
        }
        let input_scaler = StandardScaler::fit(&data.inputs);
        let output_scaler = StandardScaler::fit(&data.outputs);
        let xs = input_scaler.transform_mat(&data.inputs);
        let ys = output_scaler.transform_mat(&data.outputs);
        let models: Result<Vec<GpModel>> = (0..data.n_x)
            .into_par_iter()
            .map(|j| {
                let y = DVector::from_column_slice(ys.column(j).as_slice());
                let trained = train_gp(&xs, &y, kind, opts, seed.wrapping_add(j as u64))?;
                if trained.warning {
                    log::warn!("gp state {j}: optimizer failed to improve on its best start");
                }
                GpModel::fit(xs.clone(), y, trained.hyperparams)
            })
            .collect();
        Ok(GpStateSpaceModel {
            models: models?,
            input_scaler,
            output_scaler,
            n_x: data.n_x,
            n_u: data.n_u,
        })
    }

    /// Rebuild the cached factors from stored hyperparameters + data.
    pub fn from_spec(spec: &SsmSpec, data: &Dataset) -> Result<Self> {
        if data.len() != spec.data_rows {
            return Err(CoreError::InvalidArgument(format!(
                "dataset has {} rows, model spec expects {}",
                data.len(),
                spec.data_rows
            )));
        }
        let xs = spec.input_scaler.transform_mat(&data.inputs);
        let ys = spec.output_scaler.transform_mat(&data.outputs);
        let models: Result<Vec<GpModel>> = (0..data.n_x)
            .map(|j| {
                let y = DVector::from_column_slice(ys.column(j).as_slice());
                GpModel::fit(xs.clone(), y, spec.hyperparams[j].clone())
            })
            .collect();
        Ok(GpStateSpaceModel {
            models: models?,
            input_scaler: spec.input_scaler.clone(),
            output_scaler: spec.output_scaler.clone(),
            n_x: data.n_x,
            n_u: data.n_u,
        })
    }

    pub fn to_spec(&self, data_ref: &str) -> SsmSpec {
        SsmSpec {
            hyperparams: self.models.iter().map(|m| m.hyperparams.clone()).collect(),
            input_scaler: self.input_scaler.clone(),
            output_scaler: self.output_scaler.clone(),
            n_x: self.n_x,
            n_u: self.n_u,
            data_ref: data_ref.to_string(),
            data_rows: self.models[0].len(),
            log_marginal_likelihoods: self.models.iter().map(|m| m.log_marginal_likelihood()).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.n_x + self.n_u
    }

    pub(crate) fn standardize_input(&self, v_raw: &DVector<f64>) -> DVector<f64> {
        self.input_scaler.transform_vec(v_raw)
    }

    pub(crate) fn standardize_output(&self, j: usize, y_raw: f64) -> f64 {
        (y_raw - self.output_scaler.mean[j]) / self.output_scaler.std[j]
    }

    pub(crate) fn unstandardize_output(&self, j: usize, mean_s: f64, var_s: f64) -> (f64, f64) {
        let s = self.output_scaler.std[j];
        (mean_s * s + self.output_scaler.mean[j], var_s * s * s)
    }

    /// Posterior of the next state at the raw input [x^T u^T]: per-state
    /// means and the diagonal of the covariance.
    pub fn posterior(&self, v_raw: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if v_raw.len() != self.input_dim() {
            return Err(CoreError::DimensionMismatch("state-space posterior query".into()));
        }
        let q = self.standardize_input(v_raw);
        let mut mean = DVector::zeros(self.n_x);
        let mut var = DVector::zeros(self.n_x);
        for j in 0..self.n_x {
            let (m, v) = self.models[j].posterior(&q)?;
            let (mr, vr) = self.unstandardize_output(j, m, v);
            mean[j] = mr;
            var[j] = vr;
        }
        Ok((mean, var))
    }
}

/// Free-standing evaluation of the log marginal likelihood (factorized
/// route, never an explicit inverse).
pub fn lml_of(
    train_inputs: &DMatrix<f64>,
    train_outputs: &DVector<f64>,
    h: &KernelHyperparams,
) -> Result<f64> {
    let m = GpModel::fit(train_inputs.clone(), train_outputs.clone(), h.clone())?;
    Ok(m.log_marginal_likelihood())
}
