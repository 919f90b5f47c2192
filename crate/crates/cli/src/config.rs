//! Run configuration: one TOML file drives the full pipeline. Every field
//! has a default matching the case-study values, so an empty file is a
//! valid configuration.

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use ccpo_core::bo::BoConfig;
use ccpo_core::env::{ControlBounds, KineticParams, LuteinEnv, RewardSpec, UncertaintySpec};
use ccpo_core::gp::{KernelKind, TrainOptions};
use ccpo_core::{ConstraintSpec, PpoConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSection,
    pub gp: GpSection,
    pub constraints: ConstraintSection,
    pub penalty: PenaltySection,
    pub ppo: PpoSection,
    pub bo: BoSection,
    pub validation: ValidationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            env: EnvSection::default(),
            gp: GpSection::default(),
            constraints: ConstraintSection::default(),
            penalty: PenaltySection::default(),
            ppo: PpoSection::default(),
            bo: BoSection::default(),
            validation: ValidationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub horizon: usize,
    pub dt_hours: f64,
    pub rk4_substeps: usize,
    pub control_low: Vec<f64>,
    pub control_high: Vec<f64>,
    /// u_{-1} for the first move penalty; defaults to the bound midpoints.
    pub u_init: Option<Vec<f64>>,
    pub kinetics: KineticParams,
    pub uncertainty: UncertaintySection,
    pub reward_d: Vec<f64>,
    pub reward_c_diag: Vec<f64>,
    pub data: DataSection,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            horizon: 6,
            dt_hours: 24.0,
            rk4_substeps: 100,
            control_low: vec![0.1, 100.0],
            control_high: vec![100.0, 1000.0],
            u_init: None,
            kinetics: KineticParams::default(),
            uncertainty: UncertaintySection::default(),
            reward_d: vec![0.0, -0.001, 4.0],
            reward_c_diag: vec![0.16, 8.1e-5],
            data: DataSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    /// Read the spread values as standard deviations (default) or as
    /// variances verbatim.
    pub interpret_as_std: bool,
    pub u_m: f64,
    pub k_n: f64,
    pub u_d: f64,
    pub y_nx: f64,
    pub k_m: f64,
    pub k_d: f64,
    pub x0_mean: Vec<f64>,
    pub x0_spread: Vec<f64>,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        UncertaintySection {
            interpret_as_std: true,
            u_m: 0.0038,
            k_n: 0.75,
            u_d: 1.483e-4,
            y_nx: 7.625,
            k_m: 0.00875,
            k_d: 9.275e-5,
            x0_mean: vec![0.27, 765.0, 0.0],
            x0_spread: vec![3.125e-3, 9.5625, 0.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_batches: usize,
    pub observation_noise: bool,
    pub noise_std: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_batches: 32,
            observation_noise: true,
            noise_std: vec![0.005, 1.0, 0.02],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    /// "rbf" or "matern52".
    pub kernel: String,
    pub n_restarts: usize,
    pub opt_steps: usize,
    pub learning_rate: f64,
}

impl Default for GpSection {
    fn default() -> Self {
        GpSection { kernel: "matern52".into(), n_restarts: 4, opt_steps: 160, learning_rate: 0.08 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSection {
    /// Constraint vectors A_j, one row of this list per constraint
    /// (column-major storage of the n_x × n_g matrix A).
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub alpha: f64,
    /// Clopper-Pearson violation level; confidence is 1 - this.
    pub confidence_level: f64,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        ConstraintSection {
            a: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, -1e-3, 0.0],
                vec![-1.67, 0.0, 1.0],
            ],
            b: vec![2.6, 0.15, 0.0],
            alpha: 0.001,
            confidence_level: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltySection {
    pub kappa: f64,
    /// zeta = zeta_scale * diag(1 / var(state columns of the dataset)).
    pub zeta_scale: f64,
    /// Norm order p of the violation penalty (1 or 2).
    pub norm: u8,
}

impl Default for PenaltySection {
    fn default() -> Self {
        PenaltySection { kappa: 34.0, zeta_scale: 300.0, norm: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSection {
    /// "mlp" or "lstm".
    pub architecture: String,
    pub mlp_hidden: Vec<usize>,
    pub lstm_policy_layers: usize,
    pub lstm_policy_nodes: usize,
    pub lstm_value_layers: usize,
    pub lstm_value_nodes: usize,
    pub gamma: f64,
    pub gae_rho: f64,
    pub clip: f64,
    pub entropy_weight: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub lr_decay: f64,
    pub lr_floor_frac: f64,
    pub episodes: usize,
    pub minibatch: usize,
    pub updates_per_batch: usize,
    pub tolerance: f64,
    pub patience: usize,
    pub max_iters: usize,
    pub grad_clip: f64,
    pub log_std_init: f64,
}

impl Default for PpoSection {
    fn default() -> Self {
        PpoSection {
            architecture: "mlp".into(),
            mlp_hidden: vec![64, 64],
            lstm_policy_layers: 4,
            lstm_policy_nodes: 30,
            lstm_value_layers: 2,
            lstm_value_nodes: 30,
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
            grad_clip: 10.0,
            log_std_init: -0.7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoSection {
    pub beta_risk: f64,
    pub shape_c: f64,
    pub initial_design: usize,
    pub acquisitions: usize,
    /// Outer refinements of the tuning loop; each extra round appends one
    /// real-process rollout to the dataset and retrains the model.
    pub outer_refinements: usize,
}

impl Default for BoSection {
    fn default() -> Self {
        BoSection {
            beta_risk: 0.1,
            shape_c: 1.0,
            initial_design: 8,
            acquisitions: 12,
            outer_refinements: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSection {
    pub samples: usize,
    pub deterministic_policy: bool,
}

impl Default for ValidationSection {
    fn default() -> Self {
        ValidationSection { samples: 500, deterministic_policy: true }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text)
    }

    /// Desk-scale defaults shrunk to the smoke profile.
    pub fn apply_smoke_profile(&mut self) {
        self.ppo.episodes = 40;
        self.ppo.minibatch = 20;
        self.ppo.max_iters = 150;
        self.validation.samples = 100;
        self.bo.initial_design = 3;
        self.bo.acquisitions = 3;
        self.gp.n_restarts = 2;
        self.gp.opt_steps = 120;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.env.control_low.len() != self.env.control_high.len() {
            bail!("control bound vectors must have equal length");
        }
        if self
            .env
            .control_low
            .iter()
            .zip(&self.env.control_high)
            .any(|(l, h)| l >= h)
        {
            bail!("control lower bounds must be strictly below upper bounds");
        }
        if self.env.reward_d.len() != 3 || self.env.uncertainty.x0_mean.len() != 3 {
            bail!("the process has three states");
        }
        if !(0.0 < self.constraints.alpha && self.constraints.alpha < 1.0) {
            bail!("alpha must lie in (0, 1)");
        }
        if !(0.0 < self.constraints.confidence_level && self.constraints.confidence_level < 1.0) {
            bail!("confidence_level must lie in (0, 1)");
        }
        let n_g = self.constraints.b.len();
        if self.constraints.a.len() != n_g {
            bail!("constraint list and offsets disagree ({} vs {n_g})", self.constraints.a.len());
        }
        for (j, col) in self.constraints.a.iter().enumerate() {
            if col.len() != 3 {
                bail!("constraint vector {j} must have 3 entries, got {}", col.len());
            }
        }
        match self.gp.kernel.as_str() {
            "rbf" | "matern52" => {}
            k => bail!("unknown kernel '{k}' (expected rbf or matern52)"),
        }
        match self.ppo.architecture.as_str() {
            "mlp" | "lstm" => {}
            a => bail!("unknown architecture '{a}' (expected mlp or lstm)"),
        }
        if self.ppo.minibatch == 0 || self.ppo.minibatch > self.ppo.episodes {
            bail!("need 1 <= minibatch <= episodes");
        }
        if !(self.penalty.norm == 1 || self.penalty.norm == 2) {
            bail!("penalty norm must be 1 or 2");
        }
        if self.validation.samples == 0 {
            bail!("validation needs at least one sample");
        }
        Ok(())
    }

    pub fn kernel_kind(&self) -> KernelKind {
        match self.gp.kernel.as_str() {
            "rbf" => KernelKind::Rbf,
            _ => KernelKind::Matern52,
        }
    }

    pub fn gp_train_options(&self) -> TrainOptions {
        TrainOptions {
            n_restarts: self.gp.n_restarts,
            steps: self.gp.opt_steps,
            learning_rate: self.gp.learning_rate,
            fixed_noise: None,
        }
    }

    pub fn build_env(&self) -> LuteinEnv {
        let e = &self.env;
        let bounds = ControlBounds {
            low: DVector::from_vec(e.control_low.clone()),
            high: DVector::from_vec(e.control_high.clone()),
        };
        let u_init = match &e.u_init {
            Some(u) => DVector::from_vec(u.clone()),
            None => bounds.midpoint(),
        };
        LuteinEnv {
            kinetics: e.kinetics.clone(),
            uncertainty: UncertaintySpec {
                interpret_as_std: e.uncertainty.interpret_as_std,
                u_m: e.uncertainty.u_m,
                k_n: e.uncertainty.k_n,
                u_d: e.uncertainty.u_d,
                y_nx: e.uncertainty.y_nx,
                k_m: e.uncertainty.k_m,
                k_d: e.uncertainty.k_d,
                x0_mean: DVector::from_vec(e.uncertainty.x0_mean.clone()),
                x0_spread: DVector::from_vec(e.uncertainty.x0_spread.clone()),
            },
            bounds,
            reward_spec: RewardSpec {
                d: DVector::from_vec(e.reward_d.clone()),
                c_diag: DVector::from_vec(e.reward_c_diag.clone()),
                horizon: e.horizon,
            },
            dt_hours: e.dt_hours,
            rk4_substeps: e.rk4_substeps,
            u_init,
        }
    }

    pub fn build_constraint(&self) -> anyhow::Result<ConstraintSpec> {
        let n_g = self.constraints.b.len();
        let n_x = 3;
        let mut a = DMatrix::zeros(n_x, n_g);
        for (j, col) in self.constraints.a.iter().enumerate() {
            for i in 0..n_x {
                a[(i, j)] = col[i];
            }
        }
        Ok(ConstraintSpec::new(
            a,
            DVector::from_vec(self.constraints.b.clone()),
            self.constraints.alpha,
        )?)
    }

    pub fn build_ppo(&self) -> PpoConfig {
        let p = &self.ppo;
        PpoConfig {
            gamma: p.gamma,
            gae_rho: p.gae_rho,
            clip: p.clip,
            entropy_weight: p.entropy_weight,
            policy_lr: p.policy_lr,
            value_lr: p.value_lr,
            lr_decay: p.lr_decay,
            lr_floor_frac: p.lr_floor_frac,
            episodes: p.episodes,
            minibatch: p.minibatch,
            updates_per_batch: p.updates_per_batch,
            tolerance: p.tolerance,
            patience: p.patience,
            max_iters: p.max_iters,
            grad_clip: if p.grad_clip > 0.0 { Some(p.grad_clip) } else { None },
        }
    }

    pub fn build_bo(&self) -> BoConfig {
        BoConfig {
            beta_risk: self.bo.beta_risk,
            shape_c: self.bo.shape_c,
            initial_design: self.bo.initial_design,
            acquisitions: self.bo.acquisitions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_case_study_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.env.horizon, 6);
        assert_eq!(cfg.ppo.episodes, 200);
        assert_eq!(cfg.ppo.minibatch, 100);
        assert_eq!(cfg.ppo.updates_per_batch, 2);
        assert_eq!(cfg.constraints.alpha, 0.001);
        assert_eq!(cfg.penalty.kappa, 34.0);
        assert_eq!(cfg.bo.beta_risk, 0.1);
        assert_eq!(cfg.env.data.n_batches, 32);
        let spec = cfg.build_constraint().unwrap();
        assert_eq!(spec.iota[0], 0.001 / 3.0);
        assert_eq!(spec.a[(0, 0)], 1.0);
        assert_eq!(spec.a[(0, 2)], -1.67);
    }

    #[test]
    fn bad_sections_are_rejected() {
        assert!(RunConfig::from_toml("[gp]\nkernel = 'cubic'").is_err());
        assert!(RunConfig::from_toml("[constraints]\nalpha = 2.0").is_err());
        assert!(RunConfig::from_toml("[nonsense]\nx = 1").is_err());
        let cfg = RunConfig::from_toml("[ppo]\nepisodes = 8\nminibatch = 16");
        assert!(cfg.is_err());
    }

    #[test]
    fn smoke_profile_shrinks_the_run() {
        let mut cfg = RunConfig::default();
        cfg.apply_smoke_profile();
        assert_eq!(cfg.ppo.episodes, 40);
        assert_eq!(cfg.validation.samples, 100);
        assert_eq!(cfg.bo.initial_design, 3);
        assert_eq!(cfg.bo.acquisitions, 3);
    }
}
