//! Test-time refinement with per-parameter Gaussian update distributions and
//! selective parameter caching.
//!
//! Each refined parameter `k` owns an update distribution `N(mu_k, sigma_k^2)`.
//! Every iteration:
//!
//! 1. the gradient `g_k` is computed for every active parameter;
//! 2. parameters with `|g_k| <= gamma` are cached, i.e. removed from the
//!    active set for good and never moved again;
//! 3. the remaining distributions evolve with momentum, the mean towards
//!    `-alpha_k * g_k` with a success-rate-driven step size and the standard
//!    deviation towards `kappa / (|g_k| + eps)` clamped to `[sigma_min, sigma_max]`;
//! 4. an increment is drawn from each distribution and applied.
//!
//! The final standard deviations are returned as a per-parameter uncertainty.

use std::collections::VecDeque;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body_model::{FitParams, KinematicTree};
use crate::energy::{self, central_difference, spsa_estimate, EnergyConfig, Observation};
use crate::{Error, Result};

/// Gradient source used inside refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Analytic,
    Coordinate,
    Simultaneous,
}

/// How increments are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Sampled from adaptive Gaussians.
    Adaptive,
    /// Sampled with an adaptive mean but a constant standard deviation.
    FixedSigma(f64),
    /// Plain gradient step `-alpha_base * g`, no sampling.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub alpha_base: f64,
    /// Significance threshold for caching.
    pub gamma: f64,
    /// Stop once the update norm falls below this.
    pub epsilon_conv: f64,
    pub kappa: f64,
    pub epsilon_var: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta_mu: f64,
    pub beta_sigma: f64,
    pub max_iters: usize,
    pub success_window: usize,
    pub gradient_mode: GradientMode,
    /// Perturbation size for the finite-difference gradient modes.
    pub fd_delta: f64,
    pub caching: bool,
    pub update_rule: UpdateRule,
    /// Allow the small-update stop. Meta-training disables it.
    pub early_stop: bool,
    /// Optional plain gradient step size on shape; `None` keeps shape frozen.
    pub shape_step: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            alpha_base: 1e-5,
            gamma: 1e-4,
            epsilon_conv: 1e-3,
            kappa: 1e-7,
            epsilon_var: 1e-8,
            sigma_min: 1e-3,
            sigma_max: 0.15,
            beta_mu: 0.3,
            beta_sigma: 0.0,
            max_iters: 15,
            success_window: 1,
            gradient_mode: GradientMode::Analytic,
            fd_delta: 1e-4,
            caching: true,
            update_rule: UpdateRule::Adaptive,
            early_stop: true,
            shape_step: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_base", self.alpha_base),
            ("gamma", self.gamma),
            ("epsilon_conv", self.epsilon_conv),
            ("kappa", self.kappa),
            ("epsilon_var", self.epsilon_var),
            ("sigma_min", self.sigma_min),
            ("sigma_max", self.sigma_max),
            ("fd_delta", self.fd_delta),
        ];
        for (name, v) in positive {
            // gamma may be +inf to cache everything
            if !(v > 0.0) || (v.is_infinite() && name != "gamma") {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sigma_min >= self.sigma_max {
            return Err(Error::InvalidConfig("sigma_min must be below sigma_max".into()));
        }
        for (name, v) in [("beta_mu", self.beta_mu), ("beta_sigma", self.beta_sigma)] {
            if !(0.0..1.0).contains(&v) && !(name == "beta_sigma" && v == 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.success_window == 0 {
            return Err(Error::InvalidConfig("success_window must be at least 1".into()));
        }
        if let UpdateRule::FixedSigma(s) = self.update_rule {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidConfig(format!("fixed sigma must be positive, got {s}")));
            }
        }
        if let Some(step) = self.shape_step {
            if !(step > 0.0) || !step.is_finite() {
                return Err(Error::InvalidConfig("shape_step must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gaussian over one parameter's increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateDistribution {
    pub mu: f64,
    pub sigma: f64,
}

/// Caching verdict for one parameter at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Update,
    Cache,
}

/// Mutable refinement state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    active: Vec<bool>,
    active_count: usize,
    pub dists: Vec<UpdateDistribution>,
    history: Vec<VecDeque<bool>>,
    window: usize,
    pub iteration: usize,
    pub last_update_norm: f64,
}

impl OptimizerState {
    pub fn is_active(&self, k: usize) -> bool {
        self.active[k]
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&k| self.active[k]).collect()
    }

    pub fn dim(&self) -> usize {
        self.active.len()
    }

    /// Fraction of recorded iterations that lowered the energy; 0.5 before any record.
    pub fn success_rate(&self, k: usize) -> f64 {
        let h = &self.history[k];
        if h.is_empty() {
            0.5
        } else {
            h.iter().filter(|&&s| s).count() as f64 / h.len() as f64
        }
    }

    pub fn record_success(&mut self, k: usize, success: bool) {
        let h = &mut self.history[k];
        if h.len() == self.window {
            h.pop_front();
        }
        h.push_back(success);
    }

    pub fn mean_sigma(&self) -> f64 {
        compensated_mean(self.dists.iter().map(|d| d.sigma))
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.dists.iter().map(|d| d.sigma).collect()
    }
}

/// Fresh state over `dim` parameters: all active, `N(0, sigma_max^2)`.
pub fn init_state(cfg: &OptimizerConfig, dim: usize) -> OptimizerState {
    OptimizerState {
        active: vec![true; dim],
        active_count: dim,
        dists: vec![
            UpdateDistribution {
                mu: 0.0,
                sigma: cfg.sigma_max,
            };
            dim
        ],
        history: vec![VecDeque::with_capacity(cfg.success_window); dim],
        window: cfg.success_window,
        iteration: 0,
        last_update_norm: 0.0,
    }
}

/// Update iff `k` is active and `|g_k| > gamma`; otherwise `k` is cached for good.
pub fn caching_decision(state: &mut OptimizerState, k: usize, g_k: f64, gamma: f64) -> Decision {
    if !state.active[k] {
        return Decision::Cache;
    }
    if g_k.abs() > gamma {
        Decision::Update
    } else {
        state.active[k] = false;
        state.active_count -= 1;
        Decision::Cache
    }
}

/// `alpha_base * exp((success_rate - 0.5) / 0.1)`.
pub fn adaptive_step_size(success_rate: f64, alpha_base: f64) -> f64 {
    alpha_base * ((success_rate - 0.5) / 0.1).exp()
}

/// `clamp(kappa / (|g| + eps), sigma_min, sigma_max)`.
pub fn target_variance(g_k: f64, cfg: &OptimizerConfig) -> f64 {
    (cfg.kappa / (g_k.abs() + cfg.epsilon_var)).clamp(cfg.sigma_min, cfg.sigma_max)
}

/// Momentum update of one distribution.
pub fn evolve_distribution(
    dist: UpdateDistribution,
    g_k: f64,
    step_size: f64,
    cfg: &OptimizerConfig,
) -> UpdateDistribution {
    let mu = cfg.beta_mu * dist.mu + (1.0 - cfg.beta_mu) * (-step_size * g_k);
    let sigma = cfg.beta_sigma * dist.sigma + (1.0 - cfg.beta_sigma) * target_variance(g_k, cfg);
    UpdateDistribution {
        mu,
        sigma: sigma.clamp(cfg.sigma_min, cfg.sigma_max),
    }
}

pub fn sample_update<R: rand::Rng + ?Sized>(dist: &UpdateDistribution, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    dist.mu + dist.sigma * z
}

/// A smooth objective over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Projects an updated point back onto the feasible set.
    fn constrain(&self, _x: &mut [f64]) {}

    /// Called after each accepted parameter update.
    fn after_step(&mut self, _x: &[f64]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ActiveSetEmpty,
    SmallUpdate,
    MaxIters,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::ActiveSetEmpty => "active-set-empty",
            StopReason::SmallUpdate => "small-update",
            StopReason::MaxIters => "max-iters",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    /// Objective after this iteration's update.
    pub energy: f64,
    pub mean_sigma: f64,
    pub active_count: usize,
    pub update_norm: f64,
}

/// Outcome of [`refine_objective`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub x: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub initial_value: f64,
    pub stop_reason: StopReason,
    /// Parameter vector after every iteration, starting with the input.
    pub path: Vec<Vec<f64>>,
}

impl Refined {
    pub fn iterations_used(&self) -> usize {
        self.trace.len()
    }
}

/// Neumaier-summed mean, so equal entries average to themselves.
fn compensated_mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    (sum + carry) / n as f64
}

fn gradient_for<O: Objective, R: rand::Rng + ?Sized>(
    obj: &O,
    x: &[f64],
    active: &[usize],
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match cfg.gradient_mode {
        GradientMode::Analytic => obj.gradient(x),
        GradientMode::Coordinate => central_difference(|v| obj.value(v), x, cfg.fd_delta, active),
        GradientMode::Simultaneous => spsa_estimate(|v| obj.value(v), x, cfg.fd_delta, active, rng),
    }
}

/// Runs the refinement loop on an arbitrary objective.
pub fn refine_objective<O: Objective, R: rand::Rng + ?Sized>(
    obj: &mut O,
    x0: &[f64],
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<Refined> {
    cfg.validate()?;
    if x0.len() != obj.dim() {
        return Err(Error::InvalidInput(format!(
            "initial point has {} entries, objective expects {}",
            x0.len(),
            obj.dim()
        )));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("initial parameters are not finite".into()));
    }
    let dim = x0.len();
    let mut state = init_state(cfg, dim);
    let mut x = x0.to_vec();
    let mut current = obj.value(&x)?;
    let initial_value = current;
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut path = vec![x.clone()];
    let mut stop_reason = StopReason::MaxIters;
    let mut delta = vec![0.0; dim];
    let mut updated = Vec::with_capacity(dim);

    for t in 0..cfg.max_iters {
        state.iteration = t;
        let active = state.active_indices();
        let g = gradient_for(obj, &x, &active, cfg, rng)?;
        delta.iter_mut().for_each(|d| *d = 0.0);
        updated.clear();
        for &k in &active {
            if cfg.caching && caching_decision(&mut state, k, g[k], cfg.gamma) == Decision::Cache {
                continue;
            }
            updated.push(k);
            delta[k] = match cfg.update_rule {
                UpdateRule::Deterministic => -cfg.alpha_base * g[k],
                UpdateRule::Adaptive | UpdateRule::FixedSigma(_) => {
                    let step = adaptive_step_size(state.success_rate(k), cfg.alpha_base);
                    let mut d = evolve_distribution(state.dists[k], g[k], step, cfg);
                    if let UpdateRule::FixedSigma(s) = cfg.update_rule {
                        d.sigma = s;
                    }
                    state.dists[k] = d;
                    sample_update(&d, rng)
                }
            };
        }
        let before = x.clone();
        for (xi, d) in x.iter_mut().zip(&delta) {
            *xi += d;
        }
        obj.constrain(&mut x);
        let norm = x.iter().zip(&before).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        state.last_update_norm = norm;

        let next = if x.iter().all(|v| v.is_finite()) {
            obj.after_step(&x)
                .and_then(|_| obj.value(&x))
                .ok()
                .filter(|v| v.is_finite())
        } else {
            None
        };
        let Some(next) = next else {
            return Err(Error::Diverged { iteration: t, trace });
        };
        let success = next < current;
        for &k in &updated {
            state.record_success(k, success);
        }
        current = next;
        trace.push(TraceRecord {
            t,
            energy: current,
            mean_sigma: state.mean_sigma(),
            active_count: state.active_count(),
            update_norm: norm,
        });
        path.push(x.clone());

        if state.active_count() == 0 {
            stop_reason = StopReason::ActiveSetEmpty;
            break;
        }
        if cfg.early_stop && norm < cfg.epsilon_conv {
            stop_reason = StopReason::SmallUpdate;
            break;
        }
    }

    Ok(Refined {
        x,
        uncertainty: state.sigmas(),
        trace,
        initial_value,
        stop_reason,
        path,
    })
}

/// Floor applied to the camera scale after every refinement update.
pub const MIN_CAMERA_SCALE: f64 = 1e-3;

/// Fitting energy over the flat pose-and-camera vector with shape held in the objective.
pub struct FittingObjective<'a> {
    pub tree: &'a KinematicTree,
    pub obs: &'a Observation,
    pub cfg: EnergyConfig,
    pub template: FitParams,
    shape_step: Option<f64>,
}

impl<'a> FittingObjective<'a> {
    pub fn new(
        tree: &'a KinematicTree,
        obs: &'a Observation,
        cfg: EnergyConfig,
        template: FitParams,
        shape_step: Option<f64>,
    ) -> Self {
        FittingObjective {
            tree,
            obs,
            cfg,
            template,
            shape_step,
        }
    }

    pub fn params_at(&self, x: &[f64]) -> FitParams {
        self.template.with_flat(x)
    }
}

impl Objective for FittingObjective<'_> {
    fn dim(&self) -> usize {
        self.tree.refine_dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        energy::energy(self.tree, &self.params_at(x), self.obs, &self.cfg)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        energy::energy_grad_analytic(self.tree, &self.params_at(x), self.obs, &self.cfg)
    }

    fn constrain(&self, x: &mut [f64]) {
        let s = &mut x[self.tree.refine_dim() - 3];
        if *s < MIN_CAMERA_SCALE {
            *s = MIN_CAMERA_SCALE;
        }
    }

    fn after_step(&mut self, x: &[f64]) -> Result<()> {
        if let Some(step) = self.shape_step {
            let params = self.params_at(x);
            let (_, g) = energy::energy_and_gradient(self.tree, &params, self.obs, &self.cfg)?;
            for (b, gb) in self.template.beta.iter_mut().zip(&g.beta) {
                *b -= step * gb;
            }
            if !self.template.beta.iter().all(|b| b.is_finite()) {
                return Err(Error::NumericOverflow("shape update"));
            }
        }
        Ok(())
    }
}

/// Result of refining one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub params: FitParams,
    /// Final standard deviation per refined parameter.
    pub uncertainty: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub iterations_used: usize,
    pub stop_reason: StopReason,
    pub initial_energy: f64,
    /// Parameters after each iteration, starting with the initial guess.
    pub path: Vec<FitParams>,
}

impl RefinementResult {
    pub fn mean_uncertainty(&self) -> f64 {
        compensated_mean(self.uncertainty.iter().copied())
    }
}

/// Refines pose and camera of `init` against `obs`.
pub fn refine<R: rand::Rng + ?Sized>(
    tree: &KinematicTree,
    init: &FitParams,
    obs: &Observation,
    ecfg: &EnergyConfig,
    ocfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<RefinementResult> {
    init.check(tree)?;
    ecfg.validate()?;
    if !init.is_finite() {
        return Err(Error::InvalidInput("initial parameters are not finite".into()));
    }
    let mut obj = FittingObjective::new(tree, obs, *ecfg, init.clone(), ocfg.shape_step);
    let refined = refine_objective(&mut obj, &init.flat(), ocfg, rng)?;
    let path = refined.path.iter().map(|x| obj.params_at(x)).collect();
    Ok(RefinementResult {
        params: obj.params_at(&refined.x),
        uncertainty: refined.uncertainty,
        iterations_used: refined.trace.len(),
        trace: refined.trace,
        stop_reason: refined.stop_reason,
        initial_energy: refined.initial_value,
        path,
    })
}
