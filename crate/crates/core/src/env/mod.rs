//! Stochastic fed-batch lutein photo-production simulator: the "real"
//! uncertain process used to generate training data and to validate
//! trained policies.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSpec;
use crate::error::{CoreError, Result};
use crate::gp::Dataset;
use crate::realization::{Controller, Trajectory};
use crate::sobol::SobolSequence;

/// Kinetic constants. The six uncertain ones carry the case-study means;
/// the light/attenuation constants are configuration entries
/// (source: external-reference) and every test is insensitive to them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KineticParams {
    /// Maximum specific growth rate (1/h).
    pub u_m: f64,
    /// Nitrate half-velocity constant for growth (mg/L).
    pub k_n: f64,
    /// Biomass specific decay rate (1/h).
    pub u_d: f64,
    /// Nitrate yield coefficient (mg/g).
    pub y_nx: f64,
    /// Maximum specific lutein production rate (mg/g/h).
    pub k_m: f64,
    /// Lutein consumption rate (L/g/h).
    pub k_d: f64,
    /// Nitrate half-velocity constant for lutein synthesis (mg/L).
    pub k_nl: f64,
    /// Light saturation term, growth (umol/m^2/s).
    pub k_s: f64,
    /// Light inhibition term, growth (umol/m^2/s).
    pub k_i: f64,
    /// Light saturation term, lutein (umol/m^2/s).
    pub k_sl: f64,
    /// Light inhibition term, lutein (umol/m^2/s).
    pub k_il: f64,
    /// Reactor depth (m).
    pub depth: f64,
    /// Beer-Lambert biomass attenuation coefficient (L/(g m)).
    pub attenuation: f64,
}

impl Default for KineticParams {
    fn default() -> Self {
        KineticParams {
            u_m: 0.152,
            k_n: 30.0,
            u_d: 5.93e-3,
            y_nx: 305.0,
            k_m: 0.35,
            k_d: 3.71e-3,
            k_nl: 10.0,
            k_s: 142.8,
            k_i: 214.2,
            k_sl: 320.6,
            k_il: 480.9,
            depth: 0.09,
            attenuation: 10.0,
        }
    }
}

/// Gaussian spreads of the uncertain kinetic parameters and the initial
/// state. `interpret_as_std` selects whether the second moments below are
/// standard deviations (default) or variances ingested verbatim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub interpret_as_std: bool,
    pub u_m: f64,
    pub k_n: f64,
    pub u_d: f64,
    pub y_nx: f64,
    pub k_m: f64,
    pub k_d: f64,
    pub x0_mean: DVector<f64>,
    pub x0_spread: DVector<f64>,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        UncertaintySpec {
            interpret_as_std: true,
            u_m: 0.0038,
            k_n: 0.75,
            u_d: 1.483e-4,
            y_nx: 7.625,
            k_m: 0.00875,
            k_d: 9.275e-5,
            x0_mean: DVector::from_row_slice(&[0.27, 765.0, 0.0]),
            x0_spread: DVector::from_row_slice(&[3.125e-3, 9.5625, 0.0]),
        }
    }
}

impl UncertaintySpec {
    fn std_of(&self, v: f64) -> f64 {
        if self.interpret_as_std {
            v
        } else {
            v.sqrt()
        }
    }

    /// Zero out all spreads (deterministic process).
    pub fn deterministic(mut self) -> Self {
        self.u_m = 0.0;
        self.k_n = 0.0;
        self.u_d = 0.0;
        self.y_nx = 0.0;
        self.k_m = 0.0;
        self.k_d = 0.0;
        self.x0_spread = DVector::zeros(self.x0_spread.len());
        self
    }

    pub fn sample_params(&self, base: &KineticParams, rng: &mut ChaCha8Rng) -> KineticParams {
        let normal = rand_distr::StandardNormal;
        let mut draw = |mean: f64, spread: f64| -> f64 {
            let e: f64 = normal.sample(rng);
            mean + self.std_of(spread) * e
        };
        KineticParams {
            u_m: draw(base.u_m, self.u_m),
            k_n: draw(base.k_n, self.k_n),
            u_d: draw(base.u_d, self.u_d),
            y_nx: draw(base.y_nx, self.y_nx),
            k_m: draw(base.k_m, self.k_m),
            k_d: draw(base.k_d, self.k_d),
            ..base.clone()
        }
    }

    pub fn sample_x0(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let normal = rand_distr::StandardNormal;
        DVector::from_fn(self.x0_mean.len(), |i, _| {
            let s = self.std_of(self.x0_spread[i]);
            if s == 0.0 {
                self.x0_mean[i]
            } else {
                let e: f64 = normal.sample(rng);
                self.x0_mean[i] + s * e
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlBounds {
    pub low: DVector<f64>,
    pub high: DVector<f64>,
}

impl Default for ControlBounds {
    fn default() -> Self {
        ControlBounds {
            low: DVector::from_row_slice(&[0.1, 100.0]),
            high: DVector::from_row_slice(&[100.0, 1000.0]),
        }
    }
}

impl ControlBounds {
    pub fn midpoint(&self) -> DVector<f64> {
        (&self.low + &self.high) * 0.5
    }

    pub fn n_u(&self) -> usize {
        self.low.len()
    }

    pub fn map_unit(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.low.len(), |i, _| {
            self.low[i] + (self.high[i] - self.low[i]) * p[i]
        })
    }
}

/// Terminal productivity objective with a control-move penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardSpec {
    pub d: DVector<f64>,
    pub c_diag: DVector<f64>,
    pub horizon: usize,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            d: DVector::from_row_slice(&[0.0, -0.001, 4.0]),
            c_diag: DVector::from_row_slice(&[0.16, 8.1e-5]),
            horizon: 6,
        }
    }
}

/// R_{t+1}: the move penalty every step, plus the terminal payout at
/// t = T-1.
pub fn reward(
    x_next: &DVector<f64>,
    u: &DVector<f64>,
    u_prev: &DVector<f64>,
    t: usize,
    spec: &RewardSpec,
) -> f64 {
    let mut pen = 0.0;
    for i in 0..u.len() {
        let du = u[i] - u_prev[i];
        pen += spec.c_diag[i] * du * du;
    }
    if t + 1 == spec.horizon {
        spec.d.dot(x_next) - pen
    } else {
        -pen
    }
}

/// Haldane light-response term.
#[inline]
fn haldane(i: f64, ks: f64, ki: f64) -> f64 {
    i / (i + ks + i * i / ki)
}

/// Depth-averaged specific growth and lutein production rates: a 20-weight
/// trapezoid over 11 Beer-Lambert attenuated depths (weights 1,2,...,2,1).
pub fn light_rates(i0: f64, p: &KineticParams, c_x: f64) -> (f64, f64) {
    let mut u_sum = 0.0;
    let mut k_sum = 0.0;
    for n in 0..=10 {
        let z = n as f64 * p.depth / 10.0;
        let intensity = i0 * (-p.attenuation * c_x.max(0.0) * z).exp();
        let w = if n == 0 || n == 10 { 1.0 } else { 2.0 };
        u_sum += w * haldane(intensity, p.k_s, p.k_i);
        k_sum += w * haldane(intensity, p.k_sl, p.k_il);
    }
    (p.u_m * u_sum / 20.0, p.k_m * k_sum / 20.0)
}

/// Right-hand side of the ODE system; states are clamped at zero before
/// evaluation (concentrations are absolute).
pub fn rhs(x: &DVector<f64>, u: &DVector<f64>, p: &KineticParams) -> DVector<f64> {
    let c_x = x[0].max(0.0);
    let c_n = x[1].max(0.0);
    let c_l = x[2].max(0.0);
    let f_n = u[0];
    let i0 = u[1];
    let (u0, k0) = light_rates(i0, p, c_x);
    let monod_n = c_n / (c_n + p.k_n);
    let monod_nl = c_n / (c_n + p.k_nl);
    DVector::from_row_slice(&[
        u0 * monod_n * c_x - p.u_d * c_x,
        -p.y_nx * u0 * monod_n * c_x + f_n,
        k0 * monod_nl * c_x - p.k_d * c_l * c_x,
    ])
}

/// One control interval of fixed-step RK4 with nonnegativity clamping.
pub fn step(
    x: &DVector<f64>,
    u: &DVector<f64>,
    p: &KineticParams,
    dt_hours: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    let h = dt_hours / substeps as f64;
    let mut y = x.clone();
    for _ in 0..substeps {
        let k1 = rhs(&y, u, p);
        let k2 = rhs(&(&y + &k1 * (h / 2.0)), u, p);
        let k3 = rhs(&(&y + &k2 * (h / 2.0)), u, p);
        let k4 = rhs(&(&y + &k3 * h), u, p);
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "integrator state under controls {:?}",
                u.as_slice()
            )));
        }
    }
    Ok(y)
}

/// The full environment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LuteinEnv {
    pub kinetics: KineticParams,
    pub uncertainty: UncertaintySpec,
    pub bounds: ControlBounds,
    pub reward_spec: RewardSpec,
    pub dt_hours: f64,
    pub rk4_substeps: usize,
    /// u_{-1} for the first move penalty; defaults to the bound midpoints.
    pub u_init: DVector<f64>,
}

impl Default for LuteinEnv {
    fn default() -> Self {
        let bounds = ControlBounds::default();
        let u_init = bounds.midpoint();
        LuteinEnv {
            kinetics: KineticParams::default(),
            uncertainty: UncertaintySpec::default(),
            bounds,
            reward_spec: RewardSpec::default(),
            dt_hours: 24.0,
            rk4_substeps: 100,
            u_init,
        }
    }
}

impl LuteinEnv {
    pub fn horizon(&self) -> usize {
        self.reward_spec.horizon
    }

    pub fn n_x(&self) -> usize {
        3
    }

    pub fn n_u(&self) -> usize {
        self.bounds.n_u()
    }

    pub fn x0_sampler(&self) -> impl Fn(&mut ChaCha8Rng) -> DVector<f64> + Sync + '_ {
        move |rng| self.uncertainty.sample_x0(rng)
    }

    pub fn reward_fn(
        &self,
    ) -> impl Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, usize) -> f64 + Sync + '_ {
        move |x_next, u, u_prev, t| reward(x_next, u, u_prev, t, &self.reward_spec)
    }

    /// One episode on the real process: a kinetic-parameter realization is
    /// drawn once and held fixed, then `horizon` control intervals run.
    pub fn episode<C: Controller>(
        &self,
        controller: &mut C,
        constraint: &ConstraintSpec,
        rng: &mut ChaCha8Rng,
        deterministic: bool,
    ) -> Result<Trajectory> {
        let t_max = self.horizon();
        let mut x = self.uncertainty.sample_x0(rng);
        let params = self.uncertainty.sample_params(&self.kinetics, rng);
        controller.reset();
        let mut u_prev = self.u_init.clone();

        let obs0 = controller.observe(&x, &u_prev, 0);
        let mut states = DMatrix::zeros(t_max + 1, self.n_x());
        let mut controls = DMatrix::zeros(t_max, self.n_u());
        let mut rewards = DVector::zeros(t_max);
        let mut log_probs = DVector::zeros(t_max);
        let mut presquash = DMatrix::zeros(t_max, self.n_u());
        let mut observations = DMatrix::zeros(t_max, obs0.len());
        states.row_mut(0).copy_from_slice(x.as_slice());

        for t in 0..t_max {
            let obs = controller.observe(&x, &u_prev, t);
            let (u, z, lp) = controller.act(&obs, rng, deterministic);
            let x_next = step(&x, &u, &params, self.dt_hours, self.rk4_substeps)?;
            rewards[t] = reward(&x_next, &u, &u_prev, t, &self.reward_spec);
            observations.row_mut(t).copy_from_slice(obs.as_slice());
            controls.row_mut(t).copy_from_slice(u.as_slice());
            presquash.row_mut(t).copy_from_slice(z.as_slice());
            log_probs[t] = lp;
            states.row_mut(t + 1).copy_from_slice(x_next.as_slice());
            u_prev = u;
            x = x_next;
        }

        let mut cons = DMatrix::zeros(t_max + 1, constraint.n_g());
        for t in 0..=t_max {
            let xt = DVector::from_column_slice(states.row(t).transpose().as_slice());
            cons.row_mut(t).copy_from_slice(constraint.values(&xt).as_slice());
        }

        Ok(Trajectory {
            states,
            controls,
            rewards,
            posterior_variances: DMatrix::zeros(t_max, self.n_x()),
            log_probs,
            presquash,
            observations,
            constraint_values: cons,
        })
    }

    /// Sobol-derived open-loop excitation sequences, `n_batches` of them,
    /// mapped into the control bounds.
    pub fn sobol_control_sequences(&self, n_batches: usize) -> Vec<DMatrix<f64>> {
        let t_max = self.horizon();
        let mut seq = SobolSequence::new(self.n_u());
        (0..n_batches)
            .map(|_| {
                let mut m = DMatrix::zeros(t_max, self.n_u());
                for t in 0..t_max {
                    let p = seq.next_point();
                    m.row_mut(t).copy_from_slice(self.bounds.map_unit(&p).as_slice());
                }
                m
            })
            .collect()
    }

    /// Simulate the uncertain process under `n_batches` Sobol open-loop
    /// sequences and emit the (x_t || u_t, x_{t+1} + noise) rows.
    pub fn generate_training_data(
        &self,
        n_batches: usize,
        observation_noise_std: Option<&DVector<f64>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Dataset> {
        let t_max = self.horizon();
        let n_rows = n_batches * t_max;
        let n_v = self.n_x() + self.n_u();
        let mut inputs = DMatrix::zeros(n_rows, n_v);
        let mut outputs = DMatrix::zeros(n_rows, self.n_x());
        let sequences = self.sobol_control_sequences(n_batches);
        let normal = rand_distr::StandardNormal;

        let mut row = 0;
        for seq in &sequences {
            let mut x = self.uncertainty.sample_x0(rng);
            let params = self.uncertainty.sample_params(&self.kinetics, rng);
            for t in 0..t_max {
                let u = DVector::from_column_slice(seq.row(t).transpose().as_slice());
                let x_next = step(&x, &u, &params, self.dt_hours, self.rk4_substeps)?;
                for i in 0..self.n_x() {
                    inputs[(row, i)] = x[i];
                }
                for i in 0..self.n_u() {
                    inputs[(row, self.n_x() + i)] = u[i];
                }
                for i in 0..self.n_x() {
                    let noise = match observation_noise_std {
                        Some(s) => {
                            let e: f64 = normal.sample(rng);
                            s[i] * e
                        }
                        None => 0.0,
                    };
                    outputs[(row, i)] = x_next[i] + noise;
                }
                row += 1;
                x = x_next;
            }
        }
        Dataset::new(inputs, outputs, self.n_x(), self.n_u())
    }
}

/// Replays a fixed control sequence (data generation, open-loop baselines).
pub struct OpenLoopController {
    sequence: DMatrix<f64>,
    cursor: usize,
}

impl OpenLoopController {
    pub fn new(sequence: DMatrix<f64>) -> Self {
        OpenLoopController { sequence, cursor: 0 }
    }
}

impl Controller for OpenLoopController {
    fn reset(&mut self) {
        self.cursor = 0;
    }

    fn observe(&self, _x: &DVector<f64>, _u_prev: &DVector<f64>, _t: usize) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn act(
        &mut self,
        _obs: &DVector<f64>,
        _rng: &mut ChaCha8Rng,
        _deterministic: bool,
    ) -> (DVector<f64>, DVector<f64>, f64) {
        let u = DVector::from_column_slice(self.sequence.row(self.cursor).transpose().as_slice());
        self.cursor += 1;
        (u.clone(), u, 0.0)
    }
}
