//! Function realizations from the GP state-space model: each episode
//! recursively conditions the model on its own sampled transitions, so one
//! rollout is one coherent sample path of the posterior over dynamics.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::constraints::ConstraintSpec;
use crate::error::{CoreError, Result};
use crate::gp::{solve_lower_in_place, GpModel, GpStateSpaceModel};
use crate::rng::substream;

/// Anything that produces controls during a rollout. Implementations keep
/// whatever episode state they need (e.g. recurrent hidden state).
pub trait Controller {
    /// Called once at the start of each episode.
    fn reset(&mut self);

    /// Build the observation fed to `act` at step `t`.
    fn observe(&self, x: &DVector<f64>, u_prev: &DVector<f64>, t: usize) -> DVector<f64>;

    /// Returns (bounded control, pre-squash sample, log-density of the
    /// pre-squash sample). With `deterministic` set, takes the mode of the
    /// conditional distribution and must not consume randomness.
    fn act(
        &mut self,
        obs: &DVector<f64>,
        rng: &mut ChaCha8Rng,
        deterministic: bool,
    ) -> (DVector<f64>, DVector<f64>, f64);
}

/// One sampled episode: states, controls and everything the policy
/// optimizer needs to rank and differentiate it.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// (T+1)×n_x.
    pub states: DMatrix<f64>,
    /// T×n_u.
    pub controls: DMatrix<f64>,
    /// T raw process rewards R_{t+1}.
    pub rewards: DVector<f64>,
    /// T×n_x: diag Sigma[v_t] of the posterior that produced x_{t+1}
    /// (zero when the episode ran on the real process).
    pub posterior_variances: DMatrix<f64>,
    /// T log-densities of the pre-squash policy samples.
    pub log_probs: DVector<f64>,
    /// T×n_u pre-squash policy samples.
    pub presquash: DMatrix<f64>,
    /// T×n_obs policy observations.
    pub observations: DMatrix<f64>,
    /// (T+1)×n_g raw constraint values A_j^T x_t - b_j.
    pub constraint_values: DMatrix<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.nrows()
    }
}

/// Per-state extension of the base triangular factor. The base model block
/// is borrowed; only the appended rows [w | ell] are owned, so episodes
/// never touch the shared model.
struct CondState {
    /// Appended inputs (standardized), one Vec per row.
    inputs: Vec<Vec<f64>>,
    /// Row i holds the new factor row of length base_n + i, then ell.
    rows: Vec<Vec<f64>>,
    /// Extension of L^{-1} y for the appended outputs.
    beta_ext: Vec<f64>,
}

impl CondState {
    fn new() -> Self {
        CondState { inputs: Vec::new(), rows: Vec::new(), beta_ext: Vec::new() }
    }

    /// Forward solve of the extended lower factor against the covariance
    /// column of `q`.
    fn solve_column(&self, model: &GpModel, q: &[f64]) -> Vec<f64> {
        let base_n = model.len();
        let h = &model.hyperparams;
        let mut v = model.kernel_col(q);
        solve_lower_in_place(model.factor(), &mut v);
        for (i, row) in self.rows.iter().enumerate() {
            let k_qe = crate::gp::kernel_eval_slices(
                h.kind,
                h.signal_variance,
                h.lengthscales.as_slice(),
                q,
                &self.inputs[i],
            );
            let m = base_n + i;
            let dot: f64 = row[..m].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            v.push((k_qe - dot) / row[m]);
        }
        v
    }

    fn posterior(&self, model: &GpModel, q: &[f64]) -> (f64, f64) {
        let v = self.solve_column(model, q);
        let base_n = model.len();
        let mut mean = 0.0;
        for i in 0..base_n {
            mean += v[i] * model.beta()[i];
        }
        for (i, b) in self.beta_ext.iter().enumerate() {
            mean += v[base_n + i] * b;
        }
        let var = model.hyperparams.signal_variance - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Append a noiseless observation (q, y): extend the factor by one row.
    fn append(&mut self, model: &GpModel, q: &[f64], y: f64) -> Result<()> {
        let w = self.solve_column(model, q);
        let kqq = model.hyperparams.signal_variance;
        let wsq: f64 = w.iter().map(|x| x * x).sum();
        let mut jitter = model.jitter;
        let max_jitter = 1e-2 * model.hyperparams.signal_variance;
        let ell = loop {
            let schur = kqq + jitter - wsq;
            if schur > 0.0 {
                break schur.sqrt();
            }
            if jitter >= max_jitter {
                return Err(CoreError::SingularKernel { jitter });
            }
            jitter *= 10.0;
        };
        let base_n = model.len();
        let mut mean = 0.0;
        for i in 0..base_n {
            mean += w[i] * model.beta()[i];
        }
        for (i, b) in self.beta_ext.iter().enumerate() {
            mean += w[base_n + i] * b;
        }
        let mut row = w;
        row.push(ell);
        self.rows.push(row);
        self.inputs.push(q.to_vec());
        self.beta_ext.push((y - mean) / ell);
        Ok(())
    }
}

/// A state-space model conditioned on the pairs sampled so far this
/// episode. Appended pairs are treated as noiseless, so querying at an
/// appended input reproduces the appended output deterministically.
pub struct ConditionedGp<'a> {
    base: &'a GpStateSpaceModel,
    states: Vec<CondState>,
}

impl<'a> ConditionedGp<'a> {
    pub fn new(base: &'a GpStateSpaceModel) -> Self {
        ConditionedGp {
            base,
            states: (0..base.n_x).map(|_| CondState::new()).collect(),
        }
    }

    pub fn len_appended(&self) -> usize {
        self.states[0].rows.len()
    }

    /// Posterior of the next state at the raw input [x^T u^T].
    pub fn posterior(&self, v_raw: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if v_raw.len() != self.base.input_dim() {
            return Err(CoreError::DimensionMismatch("conditioned posterior query".into()));
        }
        let q = self.base.standardize_input(v_raw);
        let mut mean = DVector::zeros(self.base.n_x);
        let mut var = DVector::zeros(self.base.n_x);
        for j in 0..self.base.n_x {
            let (m, v) = self.states[j].posterior(&self.base.models[j], q.as_slice());
            let (mr, vr) = self.base.unstandardize_output(j, m, v);
            mean[j] = mr;
            var[j] = vr;
        }
        Ok((mean, var))
    }

    /// Condition on one observed transition (raw units).
    pub fn append(&mut self, v_raw: &DVector<f64>, x_raw: &DVector<f64>) -> Result<()> {
        if v_raw.iter().chain(x_raw.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("conditioning pair".into()));
        }
        let q = self.base.standardize_input(v_raw);
        for j in 0..self.base.n_x {
            let y = self.base.standardize_output(j, x_raw[j]);
            self.states[j].append(&self.base.models[j], q.as_slice(), y)?;
        }
        Ok(())
    }
}

/// Everything a GP-model rollout needs besides the controller.
pub struct RolloutSetup<'a> {
    pub ssm: &'a GpStateSpaceModel,
    pub constraint: &'a ConstraintSpec,
    pub horizon: usize,
    /// u_{-1} convention for the first control-move penalty.
    pub u_init: DVector<f64>,
    /// Process reward R(x_{t+1}, u_t, u_{t-1}, t).
    pub reward: &'a (dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, usize) -> f64 + Sync),
}

/// One function realization: sample x_0, then alternate policy action,
/// posterior sampling and conditioning for `horizon` steps.
pub fn rollout_realization<C: Controller>(
    setup: &RolloutSetup,
    controller: &mut C,
    x0_sampler: &(dyn Fn(&mut ChaCha8Rng) -> DVector<f64> + Sync),
    deterministic: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let t_max = setup.horizon;
    let n_x = setup.ssm.n_x;
    let n_u = setup.ssm.n_u;
    let normal = rand_distr::StandardNormal;

    let mut x = x0_sampler(rng);
    controller.reset();
    let mut u_prev = setup.u_init.clone();
    let mut cond = ConditionedGp::new(setup.ssm);

    let obs0 = controller.observe(&x, &u_prev, 0);
    let mut states = DMatrix::zeros(t_max + 1, n_x);
    let mut controls = DMatrix::zeros(t_max, n_u);
    let mut rewards = DVector::zeros(t_max);
    let mut variances = DMatrix::zeros(t_max, n_x);
    let mut log_probs = DVector::zeros(t_max);
    let mut presquash = DMatrix::zeros(t_max, n_u);
    let mut observations = DMatrix::zeros(t_max, obs0.len());
    states.row_mut(0).copy_from_slice(x.as_slice());

    for t in 0..t_max {
        let obs = controller.observe(&x, &u_prev, t);
        let (u, z, lp) = controller.act(&obs, rng, deterministic);
        let mut v = DVector::zeros(n_x + n_u);
        v.rows_mut(0, n_x).copy_from(&x);
        v.rows_mut(n_x, n_u).copy_from(&u);
        let (mean, var) = cond.posterior(&v)?;
        let mut x_next = DVector::zeros(n_x);
        for i in 0..n_x {
            let e: f64 = normal.sample(rng);
            x_next[i] = mean[i] + var[i].sqrt() * e;
        }
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::RolloutAborted {
                step: t,
                reason: "sampled state is not finite".into(),
            });
        }
        rewards[t] = (setup.reward)(&x_next, &u, &u_prev, t);
        cond.append(&v, &x_next)?;

        observations.row_mut(t).copy_from_slice(obs.as_slice());
        controls.row_mut(t).copy_from_slice(u.as_slice());
        presquash.row_mut(t).copy_from_slice(z.as_slice());
        log_probs[t] = lp;
        variances.row_mut(t).copy_from_slice(var.as_slice());
        states.row_mut(t + 1).copy_from_slice(x_next.as_slice());
        u_prev = u;
        x = x_next;
    }

    let n_g = setup.constraint.n_g();
    let mut cons = DMatrix::zeros(t_max + 1, n_g);
    for t in 0..=t_max {
        let xt = DVector::from_column_slice(states.row(t).transpose().as_slice());
        cons.row_mut(t)
            .copy_from_slice(setup.constraint.values(&xt).as_slice());
    }

    Ok(Trajectory {
        states,
        controls,
        rewards,
        posterior_variances: variances,
        log_probs,
        presquash,
        observations,
        constraint_values: cons,
    })
}

/// K independent realizations with per-episode counter-derived RNG
/// streams; parallel and serial execution produce identical batches.
pub fn batch_rollouts<C, F>(
    setup: &RolloutSetup,
    make_controller: F,
    x0_sampler: &(dyn Fn(&mut ChaCha8Rng) -> DVector<f64> + Sync),
    deterministic: bool,
    k: usize,
    batch_seed: u64,
) -> (Vec<Trajectory>, Vec<(usize, CoreError)>)
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    let results: Vec<(usize, Result<Trajectory>)> = (0..k)
        .into_par_iter()
        .map(|ep| {
            let mut rng = substream(batch_seed, ep as u64);
            let mut ctrl = make_controller();
            (ep, rollout_realization(setup, &mut ctrl, x0_sampler, deterministic, &mut rng))
        })
        .collect();
    let mut ok = Vec::with_capacity(k);
    let mut failures = Vec::new();
    for (ep, r) in results {
        match r {
            Ok(t) => ok.push(t),
            Err(e) => failures.push((ep, e)),
        }
    }
    (ok, failures)
}
