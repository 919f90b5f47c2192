//! Joint chance-constraint decomposition, Cantelli-Chebyshev constraint
//! tightening, penalty-shaped rewards and empirical satisfaction bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::special::beta_inv;

/// Affine constraint set {x : A_j^T x - b_j <= 0} with a joint risk level
/// alpha split into per-constraint budgets iota.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSpec {
    /// n_x × n_g; column j holds A_j.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub alpha: f64,
    pub iota: DVector<f64>,
}

impl ConstraintSpec {
    /// Build with the default equal risk split iota_j = alpha / n_g.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, alpha: f64) -> Result<Self> {
        if a.ncols() != b.len() {
            return Err(CoreError::DimensionMismatch(
                "constraint matrix columns vs offsets".into(),
            ));
        }
        let iota = DVector::from_vec(split_risk(alpha, a.ncols())?);
        Ok(ConstraintSpec { a, b, alpha, iota })
    }

    pub fn n_g(&self) -> usize {
        self.b.len()
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    /// Raw constraint values g_j = A_j^T x - b_j.
    pub fn values(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_g(), |j, _| self.a.column(j).dot(x) - self.b[j])
    }
}

/// Penalty weights of the shaped reward: violation weight kappa, epistemic
/// weight matrix zeta (diagonal), and the norm order p.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kappa: f64,
    /// Diagonal of zeta, one entry per state.
    pub zeta: DVector<f64>,
    pub p: u8,
}

impl PenaltyConfig {
    pub fn new(kappa: f64, zeta: DVector<f64>, p: u8) -> Result<Self> {
        if !(kappa >= 0.0) || zeta.iter().any(|z| !(*z >= 0.0)) {
            return Err(CoreError::InvalidArgument("penalty weights must be nonnegative".into()));
        }
        if p != 1 && p != 2 {
            return Err(CoreError::InvalidArgument("norm order must be 1 or 2".into()));
        }
        Ok(PenaltyConfig { kappa, zeta, p })
    }

    pub fn zero(n_x: usize) -> Self {
        PenaltyConfig { kappa: 0.0, zeta: DVector::zeros(n_x), p: 1 }
    }
}

/// Per-constraint backoff multipliers in [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackoffMultipliers(pub DVector<f64>);

impl BackoffMultipliers {
    pub fn new(xi: DVector<f64>) -> Result<Self> {
        if xi.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::InvalidArgument("multipliers must lie in [0,1]".into()));
        }
        Ok(BackoffMultipliers(xi))
    }

    pub fn ones(n_g: usize) -> Self {
        BackoffMultipliers(DVector::from_element(n_g, 1.0))
    }

    pub fn zeros(n_g: usize) -> Self {
        BackoffMultipliers(DVector::zeros(n_g))
    }
}

/// Empirical joint-satisfaction estimate with its Clopper-Pearson lower
/// confidence bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SatisfactionEstimate {
    pub f_sa: f64,
    pub f_lb: f64,
    pub samples: usize,
    pub confidence: f64,
}

/// Equal split of the joint risk: iota_j = alpha / n_g.
pub fn split_risk(alpha: f64, n_g: usize) -> Result<Vec<f64>> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(CoreError::InvalidArgument(format!("alpha {alpha} outside (0,1)")));
    }
    if n_g == 0 {
        return Err(CoreError::InvalidArgument("need at least one constraint".into()));
    }
    Ok(vec![alpha / n_g as f64; n_g])
}

/// Cantelli-Chebyshev backoff for one constraint:
/// xi * sqrt((1-iota)/iota) * sqrt(A_j^T Sigma A_j) with diagonal Sigma.
pub fn backoff(iota_j: f64, xi_j: f64, a_j: &DVector<f64>, sigma_diag: &DVector<f64>) -> Result<f64> {
    if !(0.0 < iota_j && iota_j < 1.0) {
        return Err(CoreError::InvalidArgument(format!("iota {iota_j} outside (0,1)")));
    }
    let quad = a_j
        .iter()
        .zip(sigma_diag.iter())
        .map(|(a, s)| a * a * s.max(0.0))
        .sum::<f64>();
    Ok(xi_j * ((1.0 - iota_j) / iota_j).sqrt() * quad.sqrt())
}

/// Tightened constraint values A_j^T xbar + eps_j - b_j (<= 0 means the
/// tightened constraint holds).
pub fn tightened_constraint_values(
    xbar: &DVector<f64>,
    sigma_diag: &DVector<f64>,
    spec: &ConstraintSpec,
    xi: &BackoffMultipliers,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(spec.n_g());
    for j in 0..spec.n_g() {
        let a_j = DVector::from_column_slice(spec.a.column(j).as_slice());
        let eps = backoff(spec.iota[j], xi.0[j], &a_j, sigma_diag)?;
        out[j] = a_j.dot(xbar) + eps - spec.b[j];
    }
    Ok(out)
}

/// Backoff vector eps_t for all constraints at one step.
pub fn backoffs(
    sigma_diag: &DVector<f64>,
    spec: &ConstraintSpec,
    xi: &BackoffMultipliers,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(spec.n_g());
    for j in 0..spec.n_g() {
        let a_j = DVector::from_column_slice(spec.a.column(j).as_slice());
        out[j] = backoff(spec.iota[j], xi.0[j], &a_j, sigma_diag)?;
    }
    Ok(out)
}

/// Penalty-shaped reward:
/// R - tr(zeta Sigma) - kappa * || max(0, A^T x_next + eps - b) ||_p.
pub fn penalty_reward(
    reward: f64,
    sigma_pred: &DVector<f64>,
    x_next: &DVector<f64>,
    eps_t: &DVector<f64>,
    spec: &ConstraintSpec,
    cfg: &PenaltyConfig,
) -> f64 {
    let trace = cfg.zeta.iter().zip(sigma_pred.iter()).map(|(z, s)| z * s).sum::<f64>();
    let mut norm = 0.0;
    for j in 0..spec.n_g() {
        let g = spec.a.column(j).dot(x_next) + eps_t[j] - spec.b[j];
        let v = g.max(0.0);
        match cfg.p {
            1 => norm += v,
            _ => norm += v * v,
        }
    }
    if cfg.p == 2 {
        norm = norm.sqrt();
    }
    reward - trace - cfg.kappa * norm
}

/// Worst raw constraint value over an entire trajectory:
/// max over t in 0..=T and j of A_j^T x_t - b_j.
pub fn max_violation(states: &DMatrix<f64>, spec: &ConstraintSpec) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for t in 0..states.nrows() {
        for j in 0..spec.n_g() {
            let mut g = -spec.b[j];
            for i in 0..spec.n_x() {
                g += spec.a[(i, j)] * states[(t, i)];
            }
            worst = worst.max(g);
        }
    }
    worst
}

/// Empirical satisfaction frequency with the Clopper-Pearson lower bound
/// F_LB = 1 - betainv(confidence_level, S+1-S*F_SA, S*F_SA).
pub fn estimate_satisfaction(violations: &[f64], confidence_level: f64) -> Result<SatisfactionEstimate> {
    let s = violations.len();
    if s == 0 {
        return Err(CoreError::InvalidArgument("need at least one sample".into()));
    }
    if !(0.0 < confidence_level && confidence_level < 1.0) {
        return Err(CoreError::InvalidArgument("confidence level outside (0,1)".into()));
    }
    let hits = violations.iter().filter(|x| **x <= 0.0).count();
    let f_sa = hits as f64 / s as f64;
    // hits = 0 leaves the Beta with a zero parameter; the bound degenerates
    // to 0, which is the conservative limit.
    let f_lb = if hits == 0 {
        0.0
    } else {
        1.0 - beta_inv(confidence_level, (s - hits + 1) as f64, hits as f64)
    };
    Ok(SatisfactionEstimate { f_sa, f_lb, samples: s, confidence: 1.0 - confidence_level })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// Case-study constraint set: columns are the constraint vectors.
    fn lutein_spec() -> ConstraintSpec {
        ConstraintSpec::new(
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, -1.67, 0.0, -1e-3, 0.0, 0.0, 0.0, 1.0]),
            DVector::from_row_slice(&[2.6, 0.15, 0.0]),
            0.001,
        )
        .unwrap()
    }

    #[test]
    fn split_risk_cases() {
        assert_eq!(split_risk(0.001, 3).unwrap(), vec![1.0 / 3000.0; 3]);
        assert_eq!(split_risk(0.37, 1).unwrap(), vec![0.37]);
        assert!(split_risk(1.0, 2).is_err());
        let mut rng = crate::rng::substream(0, 0);
        for _ in 0..50 {
            let alpha = rng.gen_range(1e-6..0.999);
            let n = rng.gen_range(1..9usize);
            let iotas = split_risk(alpha, n).unwrap();
            assert_relative_eq!(iotas.iter().sum::<f64>(), alpha, epsilon = 1e-15);
        }
    }

    #[test]
    fn backoff_cases() {
        let a = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let sigma = DVector::from_row_slice(&[4.0, 0.0, 0.0]);
        assert_eq!(backoff(0.3, 0.0, &a, &sigma).unwrap(), 0.0);
        assert_relative_eq!(backoff(0.5, 1.0, &a, &sigma).unwrap(), 2.0, epsilon = 1e-14);
        let a1 = DVector::from_row_slice(&[1.0]);
        let s1 = DVector::from_row_slice(&[1.0]);
        assert_relative_eq!(
            backoff(1.0 / 3000.0, 1.0, &a1, &s1).unwrap(),
            2999.0_f64.sqrt(),
            epsilon = 1e-12
        );
        assert!(backoff(0.0, 1.0, &a1, &s1).is_err());
    }

    #[test]
    fn tightened_values_at_nominal_initial_state() {
        // Hand evaluation of the case-study set at xbar = [0.27, 765, 0],
        // Sigma = 0: [0.27-2.6, -0.765-0.15, -1.67*0.27-0].
        let spec = lutein_spec();
        let x = DVector::from_row_slice(&[0.27, 765.0, 0.0]);
        let g = tightened_constraint_values(
            &x,
            &DVector::zeros(3),
            &spec,
            &BackoffMultipliers::ones(3),
        )
        .unwrap();
        assert_relative_eq!(g[0], -2.33, epsilon = 1e-12);
        assert_relative_eq!(g[1], -0.915, epsilon = 1e-12);
        assert_relative_eq!(g[2], -0.4509, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn tightened_values_nondecreasing_in_xi(
            x1 in -2.0..2.0f64, x2 in -2.0..2.0f64, x3 in -2.0..2.0f64,
            s1 in 0.0..4.0f64, s2 in 0.0..4.0f64, s3 in 0.0..4.0f64,
            lo in 0.0..1.0f64, bump in 0.0..1.0f64,
        ) {
            let spec = lutein_spec();
            let x = DVector::from_row_slice(&[x1, x2, x3]);
            let sig = DVector::from_row_slice(&[s1, s2, s3]);
            let hi = (lo + bump).min(1.0);
            let g_lo = tightened_constraint_values(&x, &sig, &spec,
                &BackoffMultipliers(DVector::from_element(3, lo))).unwrap();
            let g_hi = tightened_constraint_values(&x, &sig, &spec,
                &BackoffMultipliers(DVector::from_element(3, hi))).unwrap();
            for j in 0..3 {
                prop_assert!(g_hi[j] >= g_lo[j] - 1e-12);
            }
        }

        #[test]
        fn max_violation_beats_any_single_entry(
            vals in proptest::collection::vec(-3.0..3.0f64, 12),
        ) {
            let spec = lutein_spec();
            let states = DMatrix::from_row_slice(4, 3, &vals);
            let m = max_violation(&states, &spec);
            for t in 0..4 {
                let g = spec.values(&DVector::from_column_slice(states.row(t).transpose().as_slice()));
                for j in 0..3 {
                    prop_assert!(g[j] <= m + 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_variance_reduces_to_nominal_constraints() {
        let spec = lutein_spec();
        let mut rng = crate::rng::substream(1, 0);
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let xi = BackoffMultipliers(DVector::from_fn(3, |_, _| rng.gen_range(0.0..1.0)));
            let g = tightened_constraint_values(&x, &DVector::zeros(3), &spec, &xi).unwrap();
            let nominal = spec.values(&x);
            for j in 0..3 {
                assert_relative_eq!(g[j], nominal[j], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn penalty_reward_cases() {
        let spec = lutein_spec();
        let zero_sigma = DVector::zeros(3);
        let cfg = PenaltyConfig::new(1.0, DVector::zeros(3), 1).unwrap();
        // interior point, no tightening: reward passes through
        let x_in = DVector::from_row_slice(&[0.27, 765.0, 0.0]);
        let phi = penalty_reward(3.5, &zero_sigma, &x_in, &DVector::zeros(3), &spec, &cfg);
        assert_relative_eq!(phi, 3.5, epsilon = 1e-14);
        // single constraint violated by 0.5 under unit kappa, l1
        let x_bad = DVector::from_row_slice(&[3.1, 765.0, 0.0]);
        let phi = penalty_reward(0.0, &zero_sigma, &x_bad, &DVector::zeros(3), &spec, &cfg);
        assert_relative_eq!(phi, -0.5, epsilon = 1e-12);
        // case-study weights: independent scalar recomputation
        let zeta = DVector::from_row_slice(&[300.0 / 0.5, 300.0 / 100.0, 300.0 / 2.0]);
        let cfg = PenaltyConfig::new(34.0, zeta.clone(), 1).unwrap();
        let sigma = DVector::from_row_slice(&[0.01, 4.0, 0.05]);
        let eps = DVector::from_row_slice(&[0.2, 0.0, 0.1]);
        let x = DVector::from_row_slice(&[2.5, 300.0, 0.4]);
        let phi = penalty_reward(7.0, &sigma, &x, &eps, &spec, &cfg);
        let trace = 600.0 * 0.01 + 3.0 * 4.0 + 150.0 * 0.05;
        let g1 = (2.5 + 0.2 - 2.6_f64).max(0.0);
        let g2 = (-0.3 + 0.0 - 0.15_f64).max(0.0);
        let g3 = (-1.67 * 2.5 + 0.4 + 0.1 - 0.0_f64).max(0.0);
        assert_relative_eq!(phi, 7.0 - trace - 34.0 * (g1 + g2 + g3), epsilon = 1e-10);
    }

    #[test]
    fn penalty_reward_monotone_in_eps_and_kappa() {
        let spec = lutein_spec();
        let x = DVector::from_row_slice(&[2.55, 300.0, 0.2]);
        let sigma = DVector::zeros(3);
        let c1 = PenaltyConfig::new(1.0, DVector::zeros(3), 1).unwrap();
        let c2 = PenaltyConfig::new(2.0, DVector::zeros(3), 1).unwrap();
        let e1 = DVector::from_element(3, 0.1);
        let e2 = DVector::from_element(3, 0.3);
        let p11 = penalty_reward(0.0, &sigma, &x, &e1, &spec, &c1);
        let p12 = penalty_reward(0.0, &sigma, &x, &e2, &spec, &c1);
        let p21 = penalty_reward(0.0, &sigma, &x, &e1, &spec, &c2);
        assert!(p12 <= p11);
        assert!(p21 <= p11);
    }

    #[test]
    fn max_violation_matches_double_loop_and_is_permutation_invariant() {
        let spec = lutein_spec();
        let mut rng = crate::rng::substream(2, 0);
        let states = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..3.0));
        let mut brute = f64::NEG_INFINITY;
        for t in 0..4 {
            for j in 0..3 {
                let mut g = -spec.b[j];
                for i in 0..3 {
                    g += spec.a[(i, j)] * states[(t, i)];
                }
                brute = brute.max(g);
            }
        }
        assert_eq!(max_violation(&states, &spec), brute);
        let mut permuted = states.clone();
        permuted.swap_rows(0, 3);
        permuted.swap_rows(1, 2);
        assert_eq!(max_violation(&permuted, &spec), brute);

        // boundary case: one state exactly on a boundary, others inside
        let states = DMatrix::from_row_slice(2, 3, &[2.6, 765.0, 0.0 - 1e-9, 0.27, 765.0, 0.0 - 1e-9]);
        assert_relative_eq!(max_violation(&states, &spec), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn satisfaction_estimate_cases() {
        // all satisfied: closed form (1-v)^(1/S)
        let v = vec![-1.0; 100];
        let est = estimate_satisfaction(&v, 0.05).unwrap();
        assert_eq!(est.f_sa, 1.0);
        assert_relative_eq!(est.f_lb, 0.95_f64.powf(0.01), epsilon = 1e-9);
        // none satisfied
        let v = vec![1.0; 50];
        let est = estimate_satisfaction(&v, 0.05).unwrap();
        assert_eq!(est.f_sa, 0.0);
        assert_eq!(est.f_lb, 0.0);
        // bound below the frequency at the corners, tightening with S
        let mut prev = 0.0;
        for s in [10usize, 100, 1000] {
            let v = vec![-1.0; s];
            let est = estimate_satisfaction(&v, 0.05).unwrap();
            assert!(est.f_lb <= est.f_sa);
            assert!(est.f_lb >= prev);
            prev = est.f_lb;
        }
    }

    #[test]
    fn satisfaction_estimate_matches_beta_cdf_bisection_oracle() {
        // Independent route: bisection on the statrs Beta cdf.
        use statrs::distribution::ContinuousCDF;
        for &(s, hits, conf) in &[(500usize, 450usize, 0.01), (200, 199, 0.05), (100, 37, 0.05)] {
            let mut v = vec![-1.0; hits];
            v.extend(vec![1.0; s - hits]);
            let est = estimate_satisfaction(&v, conf).unwrap();
            let beta = statrs::distribution::Beta::new((s - hits + 1) as f64, hits as f64).unwrap();
            let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if beta.cdf(mid) < conf {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let oracle = 1.0 - 0.5 * (lo + hi);
            assert!(
                (est.f_lb - oracle).abs() < 1e-9,
                "S={s} hits={hits}: {} vs oracle {oracle}",
                est.f_lb
            );
        }
    }

    #[test]
    fn cantelli_bound_holds_for_gaussian_samples() {
        // With the tightened constraint active at equality under xi = 1,
        // the observed violation rate of x ~ N(xbar, Sigma) stays below
        // iota (the bound is distribution-free, Gaussians sit well inside).
        let mut rng = crate::rng::substream(3, 0);
        for &iota in &[0.05, 0.01] {
            let mut worst_rate = 0.0_f64;
            for _ in 0..10 {
                let a = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                let xbar = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                let sig = DVector::from_fn(3, |_, _| rng.gen_range(0.01..1.0));
                let eps = backoff(iota, 1.0, &a, &sig).unwrap();
                let b = a.dot(&xbar) + eps; // active at equality
                let mut violations = 0usize;
                let n = 20_000;
                for _ in 0..n {
                    let x = DVector::from_fn(3, |i, _| {
                        let e: f64 = rand_distr::Distribution::sample(
                            &rand_distr::StandardNormal,
                            &mut rng,
                        );
                        xbar[i] + sig[i].sqrt() * e
                    });
                    if a.dot(&x) - b > 0.0 {
                        violations += 1;
                    }
                }
                worst_rate = worst_rate.max(violations as f64 / n as f64);
            }
            assert!(worst_rate <= iota, "rate {worst_rate} above iota {iota}");
        }
    }
}
