//! Stochastic policy and value-function parameterizations (MLP and LSTM)
//! with a diagonal Gaussian head squashed into the control bounds.

mod net;
mod ppo;

pub use net::{lstm_shapes, mlp_shapes};
pub use ppo::{
    discounted_return, entropy_bonus, gae, ppo_clip_objective, ppo_update, shape_rewards,
    train_policy_fixed_backoffs, validate_policy_on_gp, CurvePoint, GpValidation, LrSchedule,
    TrainContext, TrainOutcome, UpdateStats,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::realization::Controller;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// How raw process state is presented to the networks: standardized state,
/// previous control scaled to [0,1], and normalized time. The previous
/// control and the clock enter because the reward penalizes control moves
/// and the horizon is finite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsSpec {
    pub state_mean: DVector<f64>,
    pub state_std: DVector<f64>,
    pub control_low: DVector<f64>,
    pub control_high: DVector<f64>,
    pub horizon: usize,
}

impl ObsSpec {
    pub fn dim(&self) -> usize {
        self.state_mean.len() + self.control_low.len() + 1
    }

    pub fn n_u(&self) -> usize {
        self.control_low.len()
    }

    pub fn build(&self, x: &DVector<f64>, u_prev: &DVector<f64>, t: usize) -> DVector<f64> {
        let n_x = self.state_mean.len();
        let n_u = self.control_low.len();
        let mut o = DVector::zeros(self.dim());
        for i in 0..n_x {
            o[i] = (x[i] - self.state_mean[i]) / self.state_std[i];
        }
        for i in 0..n_u {
            o[n_x + i] =
                (u_prev[i] - self.control_low[i]) / (self.control_high[i] - self.control_low[i]);
        }
        o[n_x + n_u] = t as f64 / self.horizon as f64;
        o
    }

    /// Affine-sigmoid map of a pre-squash value into the control box.
    pub fn squash(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| {
            let s = 1.0 / (1.0 + (-z[i]).exp());
            self.control_low[i] + (self.control_high[i] - self.control_low[i]) * s
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    Mlp { hidden: Vec<usize> },
    Lstm { layers: usize, width: usize },
}

/// Policy network weights plus everything needed to act: observation
/// construction, control bounds, and the log-std clamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arch: Arch,
    pub obs: ObsSpec,
    pub n_u: usize,
    pub mats: Vec<DMatrix<f64>>,
    pub log_std_bounds: (f64, f64),
}

/// Critic network weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueParams {
    pub arch: Arch,
    pub n_obs: usize,
    pub mats: Vec<DMatrix<f64>>,
}

/// PPO hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_rho: f64,
    pub clip: f64,
    pub entropy_weight: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    /// Multiplicative decay applied to both rates after every update step.
    pub lr_decay: f64,
    /// Rates never fall below this fraction of their initial value.
    pub lr_floor_frac: f64,
    /// Episodes per iteration (K).
    pub episodes: usize,
    /// Trajectories per update (M <= K).
    pub minibatch: usize,
    /// Updates per collected batch (J).
    pub updates_per_batch: usize,
    /// Convergence tolerance on consecutive mean shaped returns.
    pub tolerance: f64,
    /// Consecutive in-tolerance checks required.
    pub patience: usize,
    pub max_iters: usize,
    /// Global gradient-norm ceiling; None disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_rho: 0.99,
            clip: 0.2,
            entropy_weight: 5e-2,
            policy_lr: 5e-3,
            value_lr: 5e-3,
            lr_decay: 0.999,
            lr_floor_frac: 0.1,
            episodes: 200,
            minibatch: 100,
            updates_per_batch: 2,
            tolerance: 1e-3,
            patience: 3,
            max_iters: 2000,
            grad_clip: Some(10.0),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::CoreError;
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_rho) {
            return Err(CoreError::InvalidArgument("gamma and rho must lie in [0,1]".into()));
        }
        if !(0.0 < self.clip && self.clip < 1.0) {
            return Err(CoreError::InvalidArgument("clip factor must lie in (0,1)".into()));
        }
        if self.minibatch == 0 || self.minibatch > self.episodes {
            return Err(CoreError::InvalidArgument("need 1 <= M <= K".into()));
        }
        Ok(())
    }
}

fn uniform_mat(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

impl PolicyParams {
    /// Fresh policy with deterministic seeded initialization. The mean head
    /// starts near zero (controls at mid-range after squashing) and the
    /// log-std head at `log_std_init`.
    pub fn init(arch: Arch, obs: ObsSpec, log_std_init: f64, rng: &mut ChaCha8Rng) -> Self {
        let n_in = obs.dim();
        let n_u = obs.n_u();
        let mut mats = Vec::new();
        match &arch {
            Arch::Mlp { hidden } => {
                let mut prev = n_in;
                for &h in hidden {
                    let s = 1.0 / (prev as f64).sqrt();
                    mats.push(uniform_mat(prev, h, s, rng));
                    mats.push(DMatrix::zeros(1, h));
                    prev = h;
                }
                let s = 0.01 / (prev as f64).sqrt();
                mats.push(uniform_mat(prev, n_u, s, rng));
                mats.push(DMatrix::zeros(1, n_u));
                mats.push(DMatrix::zeros(prev, n_u));
                let mut b = DMatrix::zeros(1, n_u);
                b.fill(log_std_init);
                mats.push(b);
            }
            Arch::Lstm { layers, width } => {
                let mut prev = n_in;
                for _ in 0..*layers {
                    let s = 1.0 / (*width as f64).sqrt();
                    for gate in 0..4 {
                        mats.push(uniform_mat(prev, *width, s, rng));
                        mats.push(uniform_mat(*width, *width, s, rng));
                        let mut b = DMatrix::zeros(1, *width);
                        if gate == 1 {
                            b.fill(1.0); // forget-gate bias
                        }
                        mats.push(b);
                    }
                    prev = *width;
                }
                let s = 0.01 / (prev as f64).sqrt();
                mats.push(uniform_mat(prev, n_u, s, rng));
                mats.push(DMatrix::zeros(1, n_u));
                mats.push(DMatrix::zeros(prev, n_u));
                let mut b = DMatrix::zeros(1, n_u);
                b.fill(log_std_init);
                mats.push(b);
            }
        }
        PolicyParams { arch, obs, n_u, mats, log_std_bounds: (-7.0, 2.0) }
    }

    /// Head outputs for a single observation (row convention).
    /// Advances `state` for recurrent architectures.
    pub fn head(
        &self,
        obs: &DVector<f64>,
        state: &mut LstmState,
    ) -> (DVector<f64>, DVector<f64>) {
        let row = DMatrix::from_row_slice(1, obs.len(), obs.as_slice());
        let (mean, log_std) = net::policy_forward_plain(self, &row, state);
        (
            DVector::from_row_slice(mean.row(0).transpose().as_slice()),
            DVector::from_row_slice(log_std.row(0).transpose().as_slice()),
        )
    }

    /// Mode of the conditional distribution mapped into the control bounds.
    pub fn mode(&self, obs: &DVector<f64>, state: &mut LstmState) -> DVector<f64> {
        let (mean, _) = self.head(obs, state);
        self.obs.squash(&mean)
    }

    /// Draw (u, presquash z, log-density of z).
    pub fn sample(
        &self,
        obs: &DVector<f64>,
        state: &mut LstmState,
        rng: &mut ChaCha8Rng,
    ) -> (DVector<f64>, DVector<f64>, f64) {
        let (mean, log_std) = self.head(obs, state);
        let normal = rand_distr::StandardNormal;
        let mut z = DVector::zeros(self.n_u);
        for i in 0..self.n_u {
            let e: f64 = normal.sample(rng);
            z[i] = mean[i] + log_std[i].exp() * e;
        }
        let lp = gaussian_log_prob(&z, &mean, &log_std);
        (self.obs.squash(&z), z, lp)
    }

    pub fn n_params(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }
}

impl ValueParams {
    pub fn init(arch: Arch, n_obs: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mats = Vec::new();
        match &arch {
            Arch::Mlp { hidden } => {
                let mut prev = n_obs;
                for &h in hidden {
                    let s = 1.0 / (prev as f64).sqrt();
                    mats.push(uniform_mat(prev, h, s, rng));
                    mats.push(DMatrix::zeros(1, h));
                    prev = h;
                }
                let s = 1.0 / (prev as f64).sqrt();
                mats.push(uniform_mat(prev, 1, s, rng));
                mats.push(DMatrix::zeros(1, 1));
            }
            Arch::Lstm { layers, width } => {
                let mut prev = n_obs;
                for _ in 0..*layers {
                    let s = 1.0 / (*width as f64).sqrt();
                    for gate in 0..4 {
                        mats.push(uniform_mat(prev, *width, s, rng));
                        mats.push(uniform_mat(*width, *width, s, rng));
                        let mut b = DMatrix::zeros(1, *width);
                        if gate == 1 {
                            b.fill(1.0);
                        }
                        mats.push(b);
                    }
                    prev = *width;
                }
                let s = 1.0 / (prev as f64).sqrt();
                mats.push(uniform_mat(prev, 1, s, rng));
                mats.push(DMatrix::zeros(1, 1));
            }
        }
        ValueParams { arch, n_obs, mats }
    }

    /// V(obs) for one observation; advances recurrent state.
    pub fn value(&self, obs: &DVector<f64>, state: &mut LstmState) -> f64 {
        let row = DMatrix::from_row_slice(1, obs.len(), obs.as_slice());
        net::value_forward_plain(self, &row, state)[(0, 0)]
    }

    /// Values along a whole trajectory of observations (rows).
    pub fn values_along(&self, observations: &DMatrix<f64>) -> DVector<f64> {
        let mut state = LstmState::fresh(&self.arch, 1);
        DVector::from_fn(observations.nrows(), |t, _| {
            let row = DMatrix::from_row_slice(1, observations.ncols(), observations.row(t).transpose().as_slice());
            net::value_forward_plain(self, &row, &mut state)[(0, 0)]
        })
    }
}

pub fn gaussian_log_prob(z: &DVector<f64>, mean: &DVector<f64>, log_std: &DVector<f64>) -> f64 {
    let mut lp = 0.0;
    for i in 0..z.len() {
        let s = log_std[i].exp();
        let d = (z[i] - mean[i]) / s;
        lp += -log_std[i] - HALF_LN_2PI - 0.5 * d * d;
    }
    lp
}

/// Recurrent carry (empty for MLPs); batch-major rows.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
}

impl LstmState {
    pub fn fresh(arch: &Arch, batch: usize) -> Self {
        match arch {
            Arch::Mlp { .. } => LstmState { h: Vec::new(), c: Vec::new() },
            Arch::Lstm { layers, width } => LstmState {
                h: (0..*layers).map(|_| DMatrix::zeros(batch, *width)).collect(),
                c: (0..*layers).map(|_| DMatrix::zeros(batch, *width)).collect(),
            },
        }
    }
}

/// Controller wrapper turning `PolicyParams` into a rollout actor.
pub struct PolicyController<'a> {
    pub params: &'a PolicyParams,
    state: LstmState,
}

impl<'a> PolicyController<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        PolicyController { params, state: LstmState::fresh(&params.arch, 1) }
    }
}

impl Controller for PolicyController<'_> {
    fn reset(&mut self) {
        self.state = LstmState::fresh(&self.params.arch, 1);
    }

    fn observe(&self, x: &DVector<f64>, u_prev: &DVector<f64>, t: usize) -> DVector<f64> {
        self.params.obs.build(x, u_prev, t)
    }

    fn act(
        &mut self,
        obs: &DVector<f64>,
        rng: &mut ChaCha8Rng,
        deterministic: bool,
    ) -> (DVector<f64>, DVector<f64>, f64) {
        if deterministic {
            let (mean, log_std) = self.params.head(obs, &mut self.state);
            let lp = gaussian_log_prob(&mean, &mean, &log_std);
            (self.params.obs.squash(&mean), mean, lp)
        } else {
            let (u, z, lp) = {
                let (mean, log_std) = self.params.head(obs, &mut self.state);
                let normal = rand_distr::StandardNormal;
                let mut z = DVector::zeros(self.params.n_u);
                for i in 0..self.params.n_u {
                    let e: f64 = normal.sample(rng);
                    z[i] = mean[i] + log_std[i].exp() * e;
                }
                let lp = gaussian_log_prob(&z, &mean, &log_std);
                (self.params.obs.squash(&z), z, lp)
            };
            (u, z, lp)
        }
    }
}
