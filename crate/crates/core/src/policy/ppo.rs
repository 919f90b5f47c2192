//! Generalized advantage estimation and entropy-regularized PPO with the
//! clipped surrogate objective, plus the fixed-backoff training loop.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::constraints::{
    self, BackoffMultipliers, ConstraintSpec, PenaltyConfig, SatisfactionEstimate,
};
use crate::error::{CoreError, Result};
use crate::realization::{batch_rollouts, RolloutSetup, Trajectory};
use crate::rng::substream;

use super::net::{policy_forward_tape, value_forward_tape, TapeState};
use super::{PolicyController, PolicyParams, PpoConfig, ValueParams, HALF_LN_2PI};

/// Generalized advantage estimates by backward recursion:
/// A_t = delta_{t+1} + (rho*gamma) A_{t+1},
/// delta_{t+1} = R_{t+1} + gamma V(x_{t+1}) - V(x_t).
pub fn gae(rewards: &DVector<f64>, values: &DVector<f64>, gamma: f64, rho: f64) -> Result<DVector<f64>> {
    let t_max = rewards.len();
    if values.len() != t_max + 1 {
        return Err(CoreError::DimensionMismatch(
            "values must have one more entry than rewards".into(),
        ));
    }
    let mut adv = DVector::zeros(t_max);
    let mut acc = 0.0;
    for t in (0..t_max).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + rho * gamma * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Discounted returns-to-go G_t = sum_{t'>=t} gamma^{t'-t} R_{t'+1}.
pub fn discounted_return(rewards: &DVector<f64>, gamma: f64) -> DVector<f64> {
    let t_max = rewards.len();
    let mut g = DVector::zeros(t_max);
    let mut acc = 0.0;
    for t in (0..t_max).rev() {
        acc = rewards[t] + gamma * acc;
        g[t] = acc;
    }
    g
}

/// Mean clipped surrogate: E_t[min(r_t A_t, clip(r_t, 1-eps, 1+eps) A_t)].
pub fn ppo_clip_objective(ratios: &DVector<f64>, advantages: &DVector<f64>, clip: f64) -> f64 {
    assert_eq!(ratios.len(), advantages.len());
    let mut s = 0.0;
    for i in 0..ratios.len() {
        let r = ratios[i];
        let a = advantages[i];
        s += (r * a).min(r.clamp(1.0 - clip, 1.0 + clip) * a);
    }
    s / ratios.len() as f64
}

/// Closed-form mean entropy of the diagonal Gaussian head over a batch of
/// observations (each row treated as an episode start).
pub fn entropy_bonus(policy: &PolicyParams, observations: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for r in 0..observations.nrows() {
        let obs = DVector::from_row_slice(observations.row(r).transpose().as_slice());
        let mut state = super::LstmState::fresh(&policy.arch, 1);
        let (_, log_std) = policy.head(&obs, &mut state);
        total += log_std.iter().map(|s| 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 + s).sum::<f64>();
    }
    total / observations.nrows() as f64
}

/// Penalty-shaped rewards of one trajectory under multipliers `xi`:
/// phi_t = R_{t+1} - tr(zeta Sigma[v_t]) - kappa ||[A^T x_{t+1} + eps_t - b]^-||_p.
pub fn shape_rewards(
    traj: &Trajectory,
    spec: &ConstraintSpec,
    xi: &BackoffMultipliers,
    penalty: &PenaltyConfig,
) -> Result<DVector<f64>> {
    let t_max = traj.horizon();
    let mut out = DVector::zeros(t_max);
    for t in 0..t_max {
        let sigma = DVector::from_row_slice(traj.posterior_variances.row(t).transpose().as_slice());
        let x_next = DVector::from_row_slice(traj.states.row(t + 1).transpose().as_slice());
        let eps = constraints::backoffs(&sigma, spec, xi)?;
        out[t] = constraints::penalty_reward(traj.rewards[t], &sigma, &x_next, &eps, spec, penalty);
    }
    Ok(out)
}

/// Learning-rate schedule: exponential decay with a floor.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub policy_lr: f64,
    pub value_lr: f64,
    policy_init: f64,
    value_init: f64,
    decay: f64,
    floor_frac: f64,
}

impl LrSchedule {
    pub fn new(cfg: &PpoConfig) -> Self {
        LrSchedule {
            policy_lr: cfg.policy_lr,
            value_lr: cfg.value_lr,
            policy_init: cfg.policy_lr,
            value_init: cfg.value_lr,
            decay: cfg.lr_decay,
            floor_frac: cfg.lr_floor_frac,
        }
    }

    fn step(&mut self) {
        self.policy_lr = (self.policy_lr * self.decay).max(self.policy_init * self.floor_frac);
        self.value_lr = (self.value_lr * self.decay).max(self.value_init * self.floor_frac);
    }
}

#[derive(Debug, Clone, Default)]
pub struct UpdateStats {
    pub policy_grad_norm: f64,
    pub value_loss: f64,
    /// Updates skipped because a gradient went non-finite.
    pub skipped: usize,
}

struct MiniBatch {
    /// Per step t: observation rows for the selected trajectories.
    obs: Vec<DMatrix<f64>>,
    presquash: Vec<DMatrix<f64>>,
    old_log_probs: Vec<DMatrix<f64>>,
    advantages: Vec<DMatrix<f64>>,
    returns: Vec<DMatrix<f64>>,
    m: usize,
    t_max: usize,
}

fn assemble(
    batch: &[Trajectory],
    idx: &[usize],
    advantages: &[DVector<f64>],
    returns: &[DVector<f64>],
) -> MiniBatch {
    let t_max = batch[0].horizon();
    let n_obs = batch[0].observations.ncols();
    let n_u = batch[0].presquash.ncols();
    let m = idx.len();
    let mut mb = MiniBatch {
        obs: Vec::with_capacity(t_max),
        presquash: Vec::with_capacity(t_max),
        old_log_probs: Vec::with_capacity(t_max),
        advantages: Vec::with_capacity(t_max),
        returns: Vec::with_capacity(t_max),
        m,
        t_max,
    };
    for t in 0..t_max {
        let mut obs = DMatrix::zeros(m, n_obs);
        let mut z = DMatrix::zeros(m, n_u);
        let mut lp = DMatrix::zeros(m, 1);
        let mut adv = DMatrix::zeros(m, 1);
        let mut ret = DMatrix::zeros(m, 1);
        for (r, &k) in idx.iter().enumerate() {
            obs.row_mut(r).copy_from(&batch[k].observations.row(t));
            z.row_mut(r).copy_from(&batch[k].presquash.row(t));
            lp[(r, 0)] = batch[k].log_probs[t];
            adv[(r, 0)] = advantages[k][t];
            ret[(r, 0)] = returns[k][t];
        }
        mb.obs.push(obs);
        mb.presquash.push(z);
        mb.old_log_probs.push(lp);
        mb.advantages.push(adv);
        mb.returns.push(ret);
    }
    mb
}

/// Clipped-surrogate + entropy objective on a tape; returns the scalar node.
fn policy_objective(tape: &mut Tape, policy: &PolicyParams, vars: &[Var], mb: &MiniBatch, cfg: &PpoConfig) -> Var {
    let mut state = TapeState::fresh(tape, &policy.arch, mb.m);
    let mut clip_sum: Option<Var> = None;
    let mut ls_sum: Option<Var> = None;
    for t in 0..mb.t_max {
        let obs = tape.leaf(mb.obs[t].clone());
        let z = tape.leaf(mb.presquash[t].clone());
        let lp_old = tape.leaf(mb.old_log_probs[t].clone());
        let adv = tape.leaf(mb.advantages[t].clone());

        let (mean, log_std) = policy_forward_tape(tape, policy, vars, obs, &mut state);
        let d = tape.sub(z, mean);
        let d2 = tape.mul_elem(d, d);
        let m2s = tape.scale(log_std, -2.0);
        let inv_var = tape.exp(m2s);
        let quad = tape.mul_elem(d2, inv_var);
        let quad = tape.scale(quad, -0.5);
        let nls = tape.neg(log_std);
        let comp = tape.add(quad, nls);
        let comp = tape.add_scalar(comp, -HALF_LN_2PI);
        let lp = tape.row_sum(comp);

        let diff = tape.sub(lp, lp_old);
        let diff = tape.clamp(diff, -20.0, 20.0);
        let ratio = tape.exp(diff);
        let surr1 = tape.mul_elem(ratio, adv);
        let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let surr2 = tape.mul_elem(clipped, adv);
        let pess = tape.min(surr1, surr2);
        let s = tape.sum(pess);
        clip_sum = Some(match clip_sum {
            Some(acc) => tape.add(acc, s),
            None => s,
        });

        let ls = tape.sum(log_std);
        ls_sum = Some(match ls_sum {
            Some(acc) => tape.add(acc, ls),
            None => ls,
        });
    }
    let denom = (mb.m * mb.t_max) as f64;
    let clip_mean = tape.scale(clip_sum.unwrap(), 1.0 / denom);
    // entropy = mean(sum_i log_std_i) + const; the constant has no gradient.
    let ent = tape.scale(ls_sum.unwrap(), cfg.entropy_weight / denom);
    tape.add(clip_mean, ent)
}

/// Half mean-squared error of the critic against the returns.
fn value_objective(tape: &mut Tape, value: &ValueParams, vars: &[Var], mb: &MiniBatch) -> Var {
    let mut state = TapeState::fresh(tape, &value.arch, mb.m);
    let mut sum: Option<Var> = None;
    for t in 0..mb.t_max {
        let obs = tape.leaf(mb.obs[t].clone());
        let ret = tape.leaf(mb.returns[t].clone());
        let v = value_forward_tape(tape, value, vars, obs, &mut state);
        let d = tape.sub(v, ret);
        let d2 = tape.mul_elem(d, d);
        let s = tape.sum(d2);
        sum = Some(match sum {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    let denom = (mb.m * mb.t_max) as f64;
    tape.scale(sum.unwrap(), 0.5 / denom)
}

fn grad_step(
    mats: &mut [DMatrix<f64>],
    grads: Vec<DMatrix<f64>>,
    lr: f64,
    clip: Option<f64>,
    ascend: bool,
) -> Option<f64> {
    let mut norm_sq = 0.0;
    for g in &grads {
        for v in g.iter() {
            if !v.is_finite() {
                return None;
            }
            norm_sq += v * v;
        }
    }
    let norm = norm_sq.sqrt();
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let sign = if ascend { 1.0 } else { -1.0 };
    for (m, g) in mats.iter_mut().zip(grads) {
        *m += g * (sign * lr * scale);
    }
    Some(norm)
}

/// J epochs of minibatch updates on one collected batch. Rewards must
/// already be penalty-shaped by the caller.
pub fn ppo_update(
    batch: &[Trajectory],
    shaped: &[DVector<f64>],
    policy: &mut PolicyParams,
    value: &mut ValueParams,
    cfg: &PpoConfig,
    sched: &mut LrSchedule,
    rng: &mut ChaCha8Rng,
) -> UpdateStats {
    let k = batch.len();
    let t_max = batch[0].horizon();
    let mut stats = UpdateStats::default();

    // Critic values, advantages, returns per trajectory; terminal value
    // bootstrapped as zero on the finite horizon.
    let mut advantages = Vec::with_capacity(k);
    let mut returns = Vec::with_capacity(k);
    for (traj, phi) in batch.iter().zip(shaped.iter()) {
        let mut values = DVector::zeros(t_max + 1);
        values
            .rows_mut(0, t_max)
            .copy_from(&value.values_along(&traj.observations));
        let adv = gae(phi, &values, cfg.gamma, cfg.gae_rho).expect("length checked");
        advantages.push(adv);
        returns.push(discounted_return(phi, cfg.gamma));
    }

    // Batch-level advantage normalization (skipped for degenerate spread).
    let all: Vec<f64> = advantages.iter().flat_map(|a| a.iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    if std > 1e-12 {
        for a in &mut advantages {
            for v in a.iter_mut() {
                *v = (*v - mean) / std;
            }
        }
    }

    let m = cfg.minibatch.min(k);
    for _ in 0..cfg.updates_per_batch {
        let idx: Vec<usize> = rand::seq::index::sample(rng, k, m).into_vec();
        let mb = assemble(batch, &idx, &advantages, &returns);

        let mut tape = Tape::new();
        let vars: Vec<Var> = policy.mats.iter().map(|w| tape.leaf(w.clone())).collect();
        let obj = policy_objective(&mut tape, policy, &vars, &mb, cfg);
        let g = tape.backward(obj);
        let grads: Vec<DMatrix<f64>> = vars
            .iter()
            .zip(policy.mats.iter())
            .map(|(v, w)| g.get(*v, w.nrows(), w.ncols()))
            .collect();
        match grad_step(&mut policy.mats, grads, sched.policy_lr, cfg.grad_clip, true) {
            Some(n) => stats.policy_grad_norm = n,
            None => stats.skipped += 1,
        }

        let mut tape = Tape::new();
        let vars: Vec<Var> = value.mats.iter().map(|w| tape.leaf(w.clone())).collect();
        let loss = value_objective(&mut tape, value, &vars, &mb);
        stats.value_loss = tape.scalar_value(loss);
        let g = tape.backward(loss);
        let grads: Vec<DMatrix<f64>> = vars
            .iter()
            .zip(value.mats.iter())
            .map(|(v, w)| g.get(*v, w.nrows(), w.ncols()))
            .collect();
        if grad_step(&mut value.mats, grads, sched.value_lr, cfg.grad_clip, false).is_none() {
            stats.skipped += 1;
        }

        sched.step();
    }
    stats
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub shaped_return: f64,
    pub raw_return: f64,
    pub f_sa: f64,
}

/// Deterministic-policy validation statistics on the GP model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GpValidation {
    pub j_mean: f64,
    pub j_std: f64,
    pub estimate: SatisfactionEstimate,
}

pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub curve: Vec<CurvePoint>,
    pub converged: bool,
    pub iterations: usize,
    pub validation: GpValidation,
}

/// Everything `train_policy_fixed_backoffs` needs around the PPO loop.
pub struct TrainContext<'a> {
    pub rollout: &'a RolloutSetup<'a>,
    pub x0_sampler: &'a (dyn Fn(&mut ChaCha8Rng) -> DVector<f64> + Sync),
    pub xi: &'a BackoffMultipliers,
    pub penalty: &'a PenaltyConfig,
    pub cfg: &'a PpoConfig,
    /// Clopper-Pearson confidence level for the terminal validation.
    pub confidence_level: f64,
    pub val_samples: usize,
}

/// Deterministic-mode validation batch on the GP model: unconstrained
/// discounted objective statistics and the joint-satisfaction bounds.
pub fn validate_policy_on_gp(
    rollout: &RolloutSetup,
    x0_sampler: &(dyn Fn(&mut ChaCha8Rng) -> DVector<f64> + Sync),
    policy: &PolicyParams,
    gamma: f64,
    confidence_level: f64,
    samples: usize,
    seed: u64,
) -> Result<(GpValidation, Vec<Trajectory>)> {
    let (batch, failures) = batch_rollouts(
        rollout,
        || PolicyController::new(policy),
        x0_sampler,
        true,
        samples,
        seed,
    );
    if batch.is_empty() {
        let (ep, e) = failures.into_iter().next().expect("no successes implies a failure");
        return Err(CoreError::RolloutAborted {
            step: ep,
            reason: format!("validation batch produced zero trajectories: {e}"),
        });
    }
    let js: Vec<f64> = batch
        .iter()
        .map(|t| discounted_return(&t.rewards, gamma)[0])
        .collect();
    let j_mean = js.iter().sum::<f64>() / js.len() as f64;
    let j_std = (js.iter().map(|j| (j - j_mean).powi(2)).sum::<f64>() / (js.len() as f64 - 1.0).max(1.0))
        .sqrt();
    let violations: Vec<f64> = batch
        .iter()
        .map(|t| constraints::max_violation(&t.states, rollout.constraint))
        .collect();
    let estimate = constraints::estimate_satisfaction(&violations, confidence_level)?;
    Ok((GpValidation { j_mean, j_std, estimate }, batch))
}

/// Policy optimization under fixed backoff multipliers: collect K function
/// realizations, shape rewards, update with PPO, and stop when the mean
/// shaped return settles within tolerance for `patience` consecutive
/// checks (or at the iteration cap, returning the best policy seen).
pub fn train_policy_fixed_backoffs(
    ctx: &TrainContext,
    policy0: &PolicyParams,
    value0: &ValueParams,
    seed: u64,
) -> Result<TrainOutcome> {
    ctx.cfg.validate()?;
    let mut policy = policy0.clone();
    let mut value = value0.clone();
    let mut sched = LrSchedule::new(ctx.cfg);
    let mut rng = substream(seed, 0);

    let mut curve = Vec::new();
    let mut prev_j: Option<f64> = None;
    let mut streak = 0usize;
    let mut converged = false;
    let mut best: Option<(f64, PolicyParams, ValueParams)> = None;
    let mut iterations = 0;

    for iter in 0..ctx.cfg.max_iters {
        iterations = iter + 1;
        let batch_seed = rng.gen::<u64>();
        let (batch, failures) = batch_rollouts(
            ctx.rollout,
            || PolicyController::new(&policy),
            ctx.x0_sampler,
            false,
            ctx.cfg.episodes,
            batch_seed,
        );
        if !failures.is_empty() {
            log::warn!("iteration {iter}: {} rollout(s) aborted", failures.len());
        }
        if batch.len() < ctx.cfg.episodes / 2 {
            return Err(CoreError::RolloutAborted {
                step: iter,
                reason: "more than half of the rollouts failed".into(),
            });
        }

        let shaped: Vec<DVector<f64>> = batch
            .iter()
            .map(|t| shape_rewards(t, ctx.rollout.constraint, ctx.xi, ctx.penalty))
            .collect::<Result<_>>()?;

        let j_shaped = shaped
            .iter()
            .map(|phi| discounted_return(phi, ctx.cfg.gamma)[0])
            .sum::<f64>()
            / shaped.len() as f64;
        let j_raw = batch
            .iter()
            .map(|t| discounted_return(&t.rewards, ctx.cfg.gamma)[0])
            .sum::<f64>()
            / batch.len() as f64;
        let f_sa = batch
            .iter()
            .filter(|t| constraints::max_violation(&t.states, ctx.rollout.constraint) <= 0.0)
            .count() as f64
            / batch.len() as f64;
        curve.push(CurvePoint { iteration: iter, shaped_return: j_shaped, raw_return: j_raw, f_sa });

        if best.as_ref().map_or(true, |(b, _, _)| j_shaped > *b) {
            best = Some((j_shaped, policy.clone(), value.clone()));
        }

        ppo_update(&batch, &shaped, &mut policy, &mut value, ctx.cfg, &mut sched, &mut rng);

        if let Some(p) = prev_j {
            if (j_shaped - p).abs() <= ctx.cfg.tolerance {
                streak += 1;
                if streak >= ctx.cfg.patience {
                    converged = true;
                }
            } else {
                streak = 0;
            }
        }
        prev_j = Some(j_shaped);
        if converged {
            break;
        }
        if iter % 50 == 0 {
            log::debug!(
                "iter {iter}: shaped {j_shaped:.4}, raw {j_raw:.4}, f_sa {f_sa:.3}, lr {:.2e}",
                sched.policy_lr
            );
        }
    }

    if !converged {
        if let Some((_, p, v)) = best {
            policy = p;
            value = v;
        }
        log::warn!("iteration cap reached; returning best-so-far policy");
    }

    let val_seed = rng.gen::<u64>();
    let (validation, _) = validate_policy_on_gp(
        ctx.rollout,
        ctx.x0_sampler,
        &policy,
        ctx.cfg.gamma,
        ctx.confidence_level,
        ctx.val_samples,
        val_seed,
    )?;

    Ok(TrainOutcome { policy, value, curve, converged, iterations, validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{gaussian_log_prob, Arch, LstmState, ObsSpec};
    use approx::assert_relative_eq;

    fn obs_spec(n_x: usize, n_u: usize) -> ObsSpec {
        ObsSpec {
            state_mean: DVector::zeros(n_x),
            state_std: DVector::from_element(n_x, 1.0),
            control_low: DVector::from_element(n_u, -1.0),
            control_high: DVector::from_element(n_u, 1.0),
            horizon: 4,
        }
    }

    #[test]
    fn gae_reductions() {
        // rho=1, gamma=1, zero values: advantages are returns-to-go
        let r = DVector::from_row_slice(&[1.0, 1.0]);
        let v = DVector::zeros(3);
        let a = gae(&r, &v, 1.0, 1.0).unwrap();
        assert_eq!(a, DVector::from_row_slice(&[2.0, 1.0]));

        // rho=0: one-step TD residuals exactly
        let r = DVector::from_row_slice(&[0.5, -1.0, 2.0]);
        let v = DVector::from_row_slice(&[0.1, 0.3, -0.2, 0.4]);
        let a = gae(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert_relative_eq!(a[t], r[t] + 0.9 * v[t + 1] - v[t], epsilon = 1e-15);
        }
    }

    #[test]
    fn gae_matches_double_sum_oracle() {
        let mut rng = crate::rng::substream(4, 0);
        for _ in 0..20 {
            let t_max = 6;
            let r = DVector::from_fn(t_max, |_, _| rng.gen_range(-1.0..1.0));
            let v = DVector::from_fn(t_max + 1, |_, _| rng.gen_range(-1.0..1.0));
            let (gamma, rho) = (0.99, 0.97);
            let a = gae(&r, &v, gamma, rho).unwrap();
            for t in 0..t_max {
                let mut direct = 0.0;
                for k in 0..(t_max - t) {
                    let delta = r[t + k] + gamma * v[t + k + 1] - v[t + k];
                    direct += (rho * gamma).powi(k as i32) * delta;
                }
                assert_relative_eq!(a[t], direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gae_with_unit_weights_is_reversed_cumsum() {
        let mut rng = crate::rng::substream(5, 0);
        let r = DVector::from_fn(8, |_, _| rng.gen_range(-2.0..2.0));
        let v = DVector::zeros(9);
        let a = gae(&r, &v, 1.0, 1.0).unwrap();
        let mut cum = 0.0;
        for t in (0..8).rev() {
            cum += r[t];
            assert_eq!(a[t], cum);
        }
    }

    #[test]
    fn clip_objective_closed_forms() {
        // ratio one everywhere: mean of advantages
        let r = DVector::from_element(5, 1.0);
        let a = DVector::from_row_slice(&[1.0, -2.0, 0.5, 3.0, -1.0]);
        assert_relative_eq!(ppo_clip_objective(&r, &a, 0.2), a.sum() / 5.0, epsilon = 1e-15);
        // positive advantage clips at 1+eps
        let r = DVector::from_element(1, 2.0);
        let a = DVector::from_element(1, 1.0);
        assert_relative_eq!(ppo_clip_objective(&r, &a, 0.2), 1.2, epsilon = 1e-15);
        // negative advantage stays pessimistic
        let r = DVector::from_element(1, 0.5);
        let a = DVector::from_element(1, -1.0);
        assert_relative_eq!(ppo_clip_objective(&r, &a, 0.2), -0.8, epsilon = 1e-15);
        // far outside the clip range the objective saturates
        let a = DVector::from_element(1, 1.0);
        let r1 = DVector::from_element(1, 5.0);
        let r2 = DVector::from_element(1, 7.0);
        assert_eq!(ppo_clip_objective(&r1, &a, 0.2), ppo_clip_objective(&r2, &a, 0.2));
    }

    #[test]
    fn entropy_closed_form_and_monotonicity() {
        let mut rng = crate::rng::substream(6, 0);
        let spec = obs_spec(2, 1);
        let mut policy = PolicyParams::init(Arch::Mlp { hidden: vec![8] }, spec.clone(), 0.0, &mut rng);
        // zero the head weights so log-std is exactly the bias
        let n = policy.mats.len();
        policy.mats[n - 2].fill(0.0);
        policy.mats[n - 1].fill(0.0);
        let obs = DMatrix::zeros(3, spec.dim());
        let e1 = entropy_bonus(&policy, &obs);
        assert_relative_eq!(e1, 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5, epsilon = 1e-12);

        policy.mats[n - 1].fill(0.5);
        let e2 = entropy_bonus(&policy, &obs);
        assert!(e2 > e1);
        assert_relative_eq!(e2 - e1, 0.5, epsilon = 1e-12);
    }

    /// Synthetic trajectory with policy-consistent log-probs.
    fn synthetic_batch(
        policy: &PolicyParams,
        t_max: usize,
        count: usize,
        reward_scale: f64,
        lp_jitter: f64,
        seed: u64,
    ) -> (Vec<Trajectory>, Vec<DVector<f64>>) {
        let mut rng = crate::rng::substream(seed, 0);
        let n_obs = policy.obs.dim();
        let n_u = policy.n_u;
        let mut batch = Vec::new();
        let mut shaped = Vec::new();
        for _ in 0..count {
            let observations = DMatrix::from_fn(t_max, n_obs, |_, _| rng.gen_range(-1.0..1.0));
            let mut presquash = DMatrix::zeros(t_max, n_u);
            let mut log_probs = DVector::zeros(t_max);
            let mut state = LstmState::fresh(&policy.arch, 1);
            for t in 0..t_max {
                let obs = DVector::from_row_slice(observations.row(t).transpose().as_slice());
                let (_, z, lp) = policy.sample(&obs, &mut state, &mut rng);
                presquash.row_mut(t).copy_from_slice(z.as_slice());
                log_probs[t] = lp + rng.gen_range(-lp_jitter..lp_jitter + 1e-12);
            }
            let rewards = DVector::from_fn(t_max, |_, _| reward_scale * rng.gen_range(-1.0..1.0));
            shaped.push(rewards.clone());
            batch.push(Trajectory {
                states: DMatrix::zeros(t_max + 1, 2),
                controls: DMatrix::zeros(t_max, n_u),
                rewards,
                posterior_variances: DMatrix::zeros(t_max, 2),
                log_probs,
                presquash,
                observations,
                constraint_values: DMatrix::zeros(t_max + 1, 1),
            });
        }
        (batch, shaped)
    }

    #[test]
    fn zero_advantages_leave_policy_untouched() {
        let mut rng = crate::rng::substream(8, 0);
        let spec = obs_spec(2, 1);
        let policy0 = PolicyParams::init(Arch::Mlp { hidden: vec![6] }, spec.clone(), -0.4, &mut rng);
        let mut value = ValueParams::init(Arch::Mlp { hidden: vec![6] }, spec.dim(), &mut rng);
        for m in &mut value.mats {
            m.fill(0.0);
        }
        let (batch, _) = synthetic_batch(&policy0, 4, 3, 1.0, 0.0, 1);
        // zero rewards, zero critic -> zero advantages and returns
        let shaped: Vec<DVector<f64>> = (0..3).map(|_| DVector::zeros(4)).collect();
        let cfg = PpoConfig {
            entropy_weight: 0.0,
            episodes: 3,
            minibatch: 3,
            updates_per_batch: 2,
            ..PpoConfig::default()
        };
        let mut policy = policy0.clone();
        let mut sched = LrSchedule::new(&cfg);
        let mut urng = crate::rng::substream(9, 0);
        ppo_update(&batch, &shaped, &mut policy, &mut value, &cfg, &mut sched, &mut urng);
        for (a, b) in policy.mats.iter().zip(policy0.mats.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_update_matches_finite_difference_replay() {
        let mut rng = crate::rng::substream(10, 0);
        let spec = obs_spec(2, 1);
        let policy0 = PolicyParams::init(Arch::Mlp { hidden: vec![4] }, spec.clone(), -0.4, &mut rng);
        let value0 = ValueParams::init(Arch::Mlp { hidden: vec![4] }, spec.dim(), &mut rng);
        let (batch, shaped) = synthetic_batch(&policy0, 3, 1, 1.0, 0.05, 2);
        let cfg = PpoConfig {
            episodes: 1,
            minibatch: 1,
            updates_per_batch: 1,
            grad_clip: None,
            ..PpoConfig::default()
        };

        // advantages and returns exactly as ppo_update derives them
        let t_max = 3;
        let mut values = DVector::zeros(t_max + 1);
        values.rows_mut(0, t_max).copy_from(&value0.values_along(&batch[0].observations));
        let mut adv = gae(&shaped[0], &values, cfg.gamma, cfg.gae_rho).unwrap();
        let returns = discounted_return(&shaped[0], cfg.gamma);
        let am = adv.iter().sum::<f64>() / t_max as f64;
        let asd = (adv.iter().map(|a| (a - am).powi(2)).sum::<f64>() / t_max as f64).sqrt();
        for a in adv.iter_mut() {
            *a = (*a - am) / asd;
        }

        // plain-forward objective replay for finite differences
        let objective = |p: &PolicyParams| -> f64 {
            let mut state = LstmState::fresh(&p.arch, 1);
            let mut clip_sum = 0.0;
            let mut ls_sum = 0.0;
            for t in 0..t_max {
                let obs =
                    DVector::from_row_slice(batch[0].observations.row(t).transpose().as_slice());
                let (mean, log_std) = p.head(&obs, &mut state);
                let z = DVector::from_row_slice(batch[0].presquash.row(t).transpose().as_slice());
                let lp = gaussian_log_prob(&z, &mean, &log_std);
                let ratio = (lp - batch[0].log_probs[t]).clamp(-20.0, 20.0).exp();
                let s1 = ratio * adv[t];
                let s2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv[t];
                clip_sum += s1.min(s2);
                ls_sum += log_std.sum();
            }
            clip_sum / t_max as f64 + cfg.entropy_weight * ls_sum / t_max as f64
        };
        let value_loss = |v: &ValueParams| -> f64 {
            let vs = v.values_along(&batch[0].observations);
            let mut s = 0.0;
            for t in 0..t_max {
                s += (vs[t] - returns[t]).powi(2);
            }
            0.5 * s / t_max as f64
        };

        let h = 1e-6;
        let mut policy_expect = policy0.clone();
        for mi in 0..policy_expect.mats.len() {
            let mut g = DMatrix::zeros(policy_expect.mats[mi].nrows(), policy_expect.mats[mi].ncols());
            for r in 0..g.nrows() {
                for c in 0..g.ncols() {
                    let mut pp = policy0.clone();
                    pp.mats[mi][(r, c)] += h;
                    let mut pm = policy0.clone();
                    pm.mats[mi][(r, c)] -= h;
                    g[(r, c)] = (objective(&pp) - objective(&pm)) / (2.0 * h);
                }
            }
            policy_expect.mats[mi] += g * cfg.policy_lr;
        }
        let mut value_expect = value0.clone();
        for mi in 0..value_expect.mats.len() {
            let mut g = DMatrix::zeros(value_expect.mats[mi].nrows(), value_expect.mats[mi].ncols());
            for r in 0..g.nrows() {
                for c in 0..g.ncols() {
                    let mut vp = value0.clone();
                    vp.mats[mi][(r, c)] += h;
                    let mut vm = value0.clone();
                    vm.mats[mi][(r, c)] -= h;
                    g[(r, c)] = (value_loss(&vp) - value_loss(&vm)) / (2.0 * h);
                }
            }
            value_expect.mats[mi] -= g * cfg.value_lr;
        }

        let mut policy = policy0.clone();
        let mut value = value0.clone();
        let mut sched = LrSchedule::new(&cfg);
        let mut urng = crate::rng::substream(11, 0);
        ppo_update(&batch, &shaped, &mut policy, &mut value, &cfg, &mut sched, &mut urng);

        for (a, b) in policy.mats.iter().zip(policy_expect.mats.iter()) {
            assert!((a - b).abs().max() < 1e-8, "policy drift {}", (a - b).abs().max());
        }
        for (a, b) in value.mats.iter().zip(value_expect.mats.iter()) {
            assert!((a - b).abs().max() < 1e-8, "critic drift {}", (a - b).abs().max());
        }
    }

    #[test]
    fn critic_loss_nonincreasing_on_frozen_batch() {
        let mut rng = crate::rng::substream(12, 0);
        let spec = obs_spec(2, 1);
        let policy0 = PolicyParams::init(Arch::Mlp { hidden: vec![8] }, spec.clone(), -0.4, &mut rng);
        let mut value = ValueParams::init(Arch::Mlp { hidden: vec![8] }, spec.dim(), &mut rng);
        let (batch, shaped) = synthetic_batch(&policy0, 4, 8, 2.0, 0.02, 3);
        let cfg = PpoConfig {
            policy_lr: 0.0,
            value_lr: 1e-3,
            lr_decay: 1.0,
            episodes: 8,
            minibatch: 8,
            updates_per_batch: 1,
            ..PpoConfig::default()
        };
        let mut policy = policy0.clone();
        let mut sched = LrSchedule::new(&cfg);
        let mut losses = Vec::new();
        for i in 0..50 {
            let mut urng = crate::rng::substream(13, i);
            let stats =
                ppo_update(&batch, &shaped, &mut policy, &mut value, &cfg, &mut sched, &mut urng);
            losses.push(stats.value_loss);
        }
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "critic loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        let mut rng = crate::rng::substream(7, 0);
        let spec = obs_spec(2, 2);
        let policy = PolicyParams::init(Arch::Mlp { hidden: vec![8] }, spec.clone(), -0.4, &mut rng);
        let obs_v = spec.build(&DVector::from_row_slice(&[0.3, -0.6]), &DVector::zeros(2), 1);
        let obs_m = DMatrix::from_row_slice(1, spec.dim(), obs_v.as_slice());
        let closed = entropy_bonus(&policy, &obs_m);

        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let mut st = LstmState::fresh(&policy.arch, 1);
            let (_, _, lp) = policy.sample(&obs_v, &mut st, &mut rng);
            sum += -lp;
            sum_sq += lp * lp;
        }
        let mc = sum / n as f64;
        let var = (sum_sq / n as f64 - mc * mc).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!((closed - mc).abs() <= 3.0 * se, "closed {closed} vs mc {mc} (se {se})");
    }
}
