//! Weak-perspective projection, the keypoint fitting energy and its
//! gradients.
//!
//! ```text
//! E = sum_j w_j |s * X_j.xy + t - u_j|^2 + lambda_pose |theta[3..]|^2 + lambda_shape |beta|^2
//! ```
//!
//! The pose prior skips the three root-orientation components.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body_model::{self, left_jacobian, FitParams, KinematicTree, Posed};
use crate::{Error, Result};

/// Detected 2D keypoints with confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawObservation", into = "RawObservation")]
pub struct Observation {
    keypoints: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawObservation {
    keypoints: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

impl TryFrom<RawObservation> for Observation {
    type Error = Error;
    fn try_from(raw: RawObservation) -> Result<Self> {
        Observation::new(raw.keypoints, raw.weights)
    }
}

impl From<Observation> for RawObservation {
    fn from(o: Observation) -> Self {
        RawObservation {
            keypoints: o.keypoints,
            weights: o.weights,
        }
    }
}

impl Observation {
    pub fn new(keypoints: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if keypoints.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} keypoints but {} weights",
                keypoints.len(),
                weights.len()
            )));
        }
        if !keypoints.iter().flatten().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("non-finite keypoint".into()));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidInput("weights must lie in [0, 1]".into()));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidInput("at least one weight must be positive".into()));
        }
        Ok(Observation { keypoints, weights })
    }

    /// Bypasses the positive-weight check. Only for boundary tests.
    #[cfg(test)]
    pub(crate) fn new_unchecked(keypoints: Vec<[f64; 2]>, weights: Vec<f64>) -> Self {
        Observation { keypoints, weights }
    }

    pub fn keypoints(&self) -> &[[f64; 2]] {
        &self.keypoints
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Same keypoints with every weight multiplied by `factor`, clamped to 1.
    pub fn scaled_weights(&self, factor: f64) -> Self {
        Observation {
            keypoints: self.keypoints.clone(),
            weights: self.weights.iter().map(|w| (w * factor).min(1.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub lambda_pose: f64,
    pub lambda_shape: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            lambda_pose: 1e-3,
            lambda_shape: 1e-2,
        }
    }
}

impl EnergyConfig {
    /// Data term only.
    pub const DATA_ONLY: EnergyConfig = EnergyConfig {
        lambda_pose: 0.0,
        lambda_shape: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_pose", self.lambda_pose), ("lambda_shape", self.lambda_shape)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `(s * x + t_x, s * y + t_y)`; depth is dropped.
pub fn project(camera: &[f64; 3], point: &Vector3<f64>) -> Result<[f64; 2]> {
    if !(camera[0] > 0.0) {
        return Err(Error::InvalidCamera(camera[0]));
    }
    Ok(project_unchecked(camera, point))
}

#[inline]
fn project_unchecked(camera: &[f64; 3], point: &Vector3<f64>) -> [f64; 2] {
    [camera[0] * point.x + camera[1], camera[0] * point.y + camera[2]]
}

/// Projects every FK joint of `params`.
pub fn project_joints(tree: &KinematicTree, params: &FitParams) -> Result<Vec<[f64; 2]>> {
    let joints = body_model::forward_kinematics(tree, params)?;
    joints.iter().map(|p| project(&params.camera, p)).collect()
}

fn check_obs(tree: &KinematicTree, obs: &Observation) -> Result<()> {
    if obs.len() != tree.joint_count() {
        return Err(Error::InvalidInput(format!(
            "observation has {} keypoints, tree has {} joints",
            obs.len(),
            tree.joint_count()
        )));
    }
    Ok(())
}

fn finite(value: f64, what: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericOverflow(what))
    }
}

fn data_term_posed(posed: &Posed, camera: &[f64; 3], obs: &Observation) -> f64 {
    posed
        .positions
        .iter()
        .zip(obs.keypoints.iter().zip(&obs.weights))
        .map(|(p, (u, w))| {
            let q = project_unchecked(camera, p);
            let (dx, dy) = (q[0] - u[0], q[1] - u[1]);
            w * (dx * dx + dy * dy)
        })
        .sum()
}

fn pose_prior(params: &FitParams) -> f64 {
    params.theta[3..].iter().map(|t| t * t).sum()
}

fn shape_prior(params: &FitParams) -> f64 {
    params.beta.iter().map(|b| b * b).sum()
}

/// Weighted reprojection error (the energy without priors).
pub fn data_term(tree: &KinematicTree, params: &FitParams, obs: &Observation) -> Result<f64> {
    check_obs(tree, obs)?;
    if !(params.camera[0] > 0.0) {
        return Err(Error::InvalidCamera(params.camera[0]));
    }
    let posed = body_model::pose(tree, params)?;
    finite(data_term_posed(&posed, &params.camera, obs), "data term")
}

/// Full fitting energy.
pub fn energy(
    tree: &KinematicTree,
    params: &FitParams,
    obs: &Observation,
    cfg: &EnergyConfig,
) -> Result<f64> {
    let data = data_term(tree, params, obs)?;
    let e = data + cfg.lambda_pose * pose_prior(params) + cfg.lambda_shape * shape_prior(params);
    finite(e, "energy")
}

/// Gradient of some scalar with respect to pose, shape and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradient {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub camera: [f64; 3],
}

impl FullGradient {
    /// Pose followed by camera, matching [`FitParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.camera);
        v
    }
}

/// Back-propagates per-joint position gradients `dL/dp_j` to pose and shape.
///
/// For joint `i`, every descendant moves as `omega x (p_j - p_i)` under a
/// rotation increment, so the pose gradient is the accumulated torque
/// `sum_j (p_j - p_i) x f_j` pulled back through the exponential map.
pub(crate) fn backprop_joint_forces(
    tree: &KinematicTree,
    params: &FitParams,
    posed: &Posed,
    forces: &[Vector3<f64>],
) -> (Vec<f64>, Vec<f64>) {
    let j = tree.joint_count();
    let mut force_sum: Vec<Vector3<f64>> = forces.to_vec();
    let mut moment: Vec<Vector3<f64>> = (0..j).map(|i| posed.positions[i].cross(&forces[i])).collect();
    for i in (1..j).rev() {
        let p = tree.parent(i).expect("non-root has a parent");
        let (f, m) = (force_sum[i], moment[i]);
        force_sum[p] += f;
        moment[p] += m;
    }
    let mut theta = vec![0.0; 3 * j];
    let mut length_grad = vec![0.0; j];
    for i in 0..j {
        let torque = moment[i] - posed.positions[i].cross(&force_sum[i]);
        let parent_rot = match tree.parent(i) {
            Some(p) => posed.global[p],
            None => Matrix3::identity(),
        };
        let g = left_jacobian(&params.joint_rotation(i)).transpose() * (parent_rot.transpose() * torque);
        theta[3 * i..3 * i + 3].copy_from_slice(g.as_slice());
        if let Some(p) = tree.parent(i) {
            length_grad[i] = (posed.global[p] * tree.rest_offset(i)).dot(&force_sum[i]);
        }
    }
    let basis = tree.shape_basis();
    let beta = (0..body_model::SHAPE_DIM)
        .map(|m| (0..j).map(|i| basis[i][m] * length_grad[i]).sum())
        .collect();
    (theta, beta)
}

/// Energy and its exact gradient with respect to every parameter.
pub fn energy_and_gradient(
    tree: &KinematicTree,
    params: &FitParams,
    obs: &Observation,
    cfg: &EnergyConfig,
) -> Result<(f64, FullGradient)> {
    check_obs(tree, obs)?;
    let camera = params.camera;
    if !(camera[0] > 0.0) {
        return Err(Error::InvalidCamera(camera[0]));
    }
    let posed = body_model::pose(tree, params)?;
    let s = camera[0];
    let mut forces = Vec::with_capacity(tree.joint_count());
    let mut cam = [0.0; 3];
    let mut data = 0.0;
    for (p, (u, &w)) in posed.positions.iter().zip(obs.keypoints.iter().zip(&obs.weights)) {
        let q = project_unchecked(&camera, p);
        let r = [q[0] - u[0], q[1] - u[1]];
        data += w * (r[0] * r[0] + r[1] * r[1]);
        cam[0] += 2.0 * w * (r[0] * p.x + r[1] * p.y);
        cam[1] += 2.0 * w * r[0];
        cam[2] += 2.0 * w * r[1];
        forces.push(Vector3::new(2.0 * w * s * r[0], 2.0 * w * s * r[1], 0.0));
    }
    let (mut theta, mut beta) = backprop_joint_forces(tree, params, &posed, &forces);
    for (g, t) in theta.iter_mut().zip(&params.theta).skip(3) {
        *g += 2.0 * cfg.lambda_pose * t;
    }
    for (g, b) in beta.iter_mut().zip(&params.beta) {
        *g += 2.0 * cfg.lambda_shape * b;
    }
    let e = data + cfg.lambda_pose * pose_prior(params) + cfg.lambda_shape * shape_prior(params);
    let e = finite(e, "energy")?;
    let grad = FullGradient { theta, beta, camera: cam };
    if !grad.theta.iter().chain(&grad.beta).chain(&grad.camera).all(|x| x.is_finite()) {
        return Err(Error::NumericOverflow("energy gradient"));
    }
    Ok((e, grad))
}

/// Exact gradient over pose and camera (shape held fixed), length `3J + 3`.
pub fn energy_grad_analytic(
    tree: &KinematicTree,
    params: &FitParams,
    obs: &Observation,
    cfg: &EnergyConfig,
) -> Result<Vec<f64>> {
    Ok(energy_and_gradient(tree, params, obs, cfg)?.1.flat())
}

/// Finite-difference estimator flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StochasticMode {
    /// Central difference along each coordinate separately.
    Coordinate,
    /// One Rademacher perturbation of all coordinates at once (classical SPSA).
    Simultaneous,
}

/// Central differences `(f(x + d e_k) - f(x - d e_k)) / 2d` for `k` in `indices`;
/// other entries are zero.
pub fn central_difference<F>(mut f: F, x: &[f64], delta: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for &k in indices {
        probe[k] = x[k] + delta;
        let up = f(&probe)?;
        probe[k] = x[k] - delta;
        let down = f(&probe)?;
        probe[k] = x[k];
        g[k] = (up - down) / (2.0 * delta);
    }
    Ok(g)
}

/// Simultaneous-perturbation estimate over `indices` with one Rademacher draw.
pub fn spsa_estimate<F, R>(mut f: F, x: &[f64], delta: f64, indices: &[usize], rng: &mut R) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: rand::Rng + ?Sized,
{
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    let mut signs = vec![0.0; x.len()];
    for &k in indices {
        signs[k] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    }
    let plus: Vec<f64> = x.iter().zip(&signs).map(|(v, s)| v + delta * s).collect();
    let minus: Vec<f64> = x.iter().zip(&signs).map(|(v, s)| v - delta * s).collect();
    let diff = (f(&plus)? - f(&minus)?) / (2.0 * delta);
    let mut g = vec![0.0; x.len()];
    for &k in indices {
        g[k] = diff / signs[k];
    }
    Ok(g)
}

/// Gradient estimate over pose and camera from energy evaluations only.
pub fn energy_grad_stochastic<R: rand::Rng + ?Sized>(
    tree: &KinematicTree,
    params: &FitParams,
    obs: &Observation,
    cfg: &EnergyConfig,
    delta: f64,
    mode: StochasticMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..tree.refine_dim()).collect();
    energy_grad_stochastic_masked(tree, params, obs, cfg, delta, mode, &all, rng)
}

/// As [`energy_grad_stochastic`], touching only `indices`.
#[allow(clippy::too_many_arguments)]
pub fn energy_grad_stochastic_masked<R: rand::Rng + ?Sized>(
    tree: &KinematicTree,
    params: &FitParams,
    obs: &Observation,
    cfg: &EnergyConfig,
    delta: f64,
    mode: StochasticMode,
    indices: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    params.check(tree)?;
    let x = params.flat();
    let mut scratch = params.clone();
    let f = |v: &[f64]| {
        scratch.set_flat(v);
        energy(tree, &scratch, obs, cfg)
    };
    match mode {
        StochasticMode::Coordinate => central_difference(f, &x, delta, indices),
        StochasticMode::Simultaneous => spsa_estimate(f, &x, delta, indices, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;
    use approx::assert_relative_eq;

    fn random_instance(seed: u64) -> (KinematicTree, FitParams, Observation) {
        let tree = KinematicTree::default_human();
        let mut g = rng::seeded(seed);
        let mut params = FitParams::rest(24);
        params.theta.iter_mut().for_each(|t| *t = g.gen_range(-0.6..0.6));
        params.beta.iter_mut().for_each(|b| *b = g.gen_range(-2.0..2.0));
        params.camera = [g.gen_range(0.8..1.2), g.gen_range(-3.0..3.0), g.gen_range(-3.0..3.0)];
        let kp = (0..24).map(|_| [g.gen_range(-80.0..80.0), g.gen_range(-80.0..80.0)]).collect();
        let w = (0..24).map(|_| g.gen_range(0.0..1.0)).collect();
        (tree, params, Observation::new(kp, w).unwrap())
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project(&[1.0, 0.0, 0.0], &Vector3::new(0.0, 0.0, 5.0)).unwrap(), [0.0, 0.0]);
        assert_eq!(project(&[2.0, 1.0, -1.0], &Vector3::new(1.0, 1.0, 9.0)).unwrap(), [3.0, 1.0]);
        assert!(matches!(project(&[0.0, 0.0, 0.0], &Vector3::zeros()), Err(Error::InvalidCamera(_))));
        assert!(matches!(project(&[-1.0, 0.0, 0.0], &Vector3::zeros()), Err(Error::InvalidCamera(_))));
    }

    #[test]
    fn doubling_scale_doubles_spread() {
        let pts = [Vector3::new(1.0, 2.0, 0.0), Vector3::new(-3.0, 0.5, 1.0)];
        for p in pts {
            let a = project(&[1.0, 4.0, -2.0], &p).unwrap();
            let b = project(&[2.0, 4.0, -2.0], &p).unwrap();
            assert_relative_eq!(b[0] - 4.0, 2.0 * (a[0] - 4.0));
            assert_relative_eq!(b[1] + 2.0, 2.0 * (a[1] + 2.0));
        }
    }

    #[test]
    fn observation_validation() {
        assert!(Observation::new(vec![[0.0, 0.0]], vec![0.0]).is_err());
        assert!(Observation::new(vec![[0.0, 0.0]], vec![1.5]).is_err());
        assert!(Observation::new(vec![[0.0, 0.0]; 2], vec![1.0]).is_err());
        assert!(Observation::new(vec![[f64::NAN, 0.0]], vec![1.0]).is_err());
        let obs = Observation::new(vec![[0.0, 0.0]], vec![0.3]).unwrap();
        let back: Observation = serde_json::from_str(&serde_json::to_string(&obs).unwrap()).unwrap();
        assert_eq!(back, obs);
        assert!(serde_json::from_str::<Observation>(r#"{"keypoints":[[0,0]],"weights":[0]}"#).is_err());
    }

    #[test]
    fn self_consistent_observation_has_zero_energy() {
        let (tree, params, _) = random_instance(1);
        let kp = project_joints(&tree, &params).unwrap();
        let obs = Observation::new(kp, vec![1.0; 24]).unwrap();
        let e = energy(&tree, &params, &obs, &EnergyConfig::DATA_ONLY).unwrap();
        assert!(e < 1e-20, "{e}");
    }

    #[test]
    fn zero_weights_and_priors_give_zero_energy() {
        let (tree, params, obs) = random_instance(2);
        let obs = Observation::new_unchecked(obs.keypoints().to_vec(), vec![0.0; 24]);
        assert_eq!(energy(&tree, &params, &obs, &EnergyConfig::DATA_ONLY).unwrap(), 0.0);
    }

    /// Recomputes the value directly from its definition, summed back to front.
    fn energy_oracle(tree: &KinematicTree, params: &FitParams, obs: &Observation, cfg: &EnergyConfig) -> f64 {
        let joints = body_model::forward_kinematics(tree, params).unwrap();
        let [s, tx, ty] = params.camera;
        let mut e = 0.0;
        for j in (0..joints.len()).rev() {
            let px = s * joints[j].x + tx - obs.keypoints()[j][0];
            let py = s * joints[j].y + ty - obs.keypoints()[j][1];
            e += obs.weights()[j] * (px * px + py * py);
        }
        for k in (3..params.theta.len()).rev() {
            e += cfg.lambda_pose * params.theta[k] * params.theta[k];
        }
        for k in (0..params.beta.len()).rev() {
            e += cfg.lambda_shape * params.beta[k] * params.beta[k];
        }
        e
    }

    #[test]
    fn energy_matches_reverse_sum_oracle() {
        for seed in 0..20 {
            let (tree, params, obs) = random_instance(seed);
            let cfg = EnergyConfig { lambda_pose: 0.3, lambda_shape: 0.7 };
            let e = energy(&tree, &params, &obs, &cfg).unwrap();
            let o = energy_oracle(&tree, &params, &obs, &cfg);
            assert!((e - o).abs() <= 1e-10 * o.max(1.0), "{e} vs {o}");
        }
    }

    #[test]
    fn doubling_weights_doubles_data_term() {
        let (tree, params, obs) = random_instance(3);
        let half = Observation::new(obs.keypoints().to_vec(), obs.weights().iter().map(|w| w / 2.0).collect()).unwrap();
        let a = data_term(&tree, &params, &half).unwrap();
        let b = data_term(&tree, &params, &obs).unwrap();
        assert_relative_eq!(2.0 * a, b, max_relative = 1e-14);
    }

    #[test]
    fn energy_rejects_bad_inputs() {
        let (tree, mut params, obs) = random_instance(4);
        let cfg = EnergyConfig::default();
        params.camera[0] = -1.0;
        assert!(matches!(energy(&tree, &params, &obs, &cfg), Err(Error::InvalidCamera(_))));
        params.camera[0] = 1.0;
        params.theta.pop();
        assert!(matches!(energy(&tree, &params, &obs, &cfg), Err(Error::InvalidInput(_))));
        let (tree, mut params, obs) = random_instance(4);
        params.camera[0] = 1e300;
        assert!(matches!(energy(&tree, &params, &obs, &cfg), Err(Error::NumericOverflow(_))));
    }

    fn fd_full(tree: &KinematicTree, params: &FitParams, obs: &Observation, cfg: &EnergyConfig, h: f64) -> FullGradient {
        let e = |p: &FitParams| energy(tree, p, obs, cfg).unwrap();
        let mut out = FullGradient {
            theta: vec![0.0; params.theta.len()],
            beta: vec![0.0; params.beta.len()],
            camera: [0.0; 3],
        };
        for k in 0..params.theta.len() {
            let (mut a, mut b) = (params.clone(), params.clone());
            a.theta[k] += h;
            b.theta[k] -= h;
            out.theta[k] = (e(&a) - e(&b)) / (2.0 * h);
        }
        for k in 0..params.beta.len() {
            let (mut a, mut b) = (params.clone(), params.clone());
            a.beta[k] += h;
            b.beta[k] -= h;
            out.beta[k] = (e(&a) - e(&b)) / (2.0 * h);
        }
        for k in 0..3 {
            let (mut a, mut b) = (params.clone(), params.clone());
            a.camera[k] += h;
            b.camera[k] -= h;
            out.camera[k] = (e(&a) - e(&b)) / (2.0 * h);
        }
        out
    }

    fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
        diff / (1.0 + scale)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let cfg = EnergyConfig::default();
        for seed in 0..10 {
            let (tree, params, obs) = random_instance(100 + seed);
            let (_, g) = energy_and_gradient(&tree, &params, &obs, &cfg).unwrap();
            let fd = fd_full(&tree, &params, &obs, &cfg, 1e-6);
            assert!(rel_inf(&g.theta, &fd.theta) < 1e-5);
            assert!(rel_inf(&g.beta, &fd.beta) < 1e-5);
            assert!(rel_inf(&g.camera, &fd.camera) < 1e-5);
        }
    }

    #[test]
    fn gradient_vanishes_at_noiseless_optimum() {
        let (tree, params, _) = random_instance(5);
        let obs = Observation::new(project_joints(&tree, &params).unwrap(), vec![1.0; 24]).unwrap();
        let g = energy_grad_analytic(&tree, &params, &obs, &EnergyConfig::DATA_ONLY).unwrap();
        assert_eq!(g.len(), 75);
        assert!(g.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn scale_gradient_by_hand_for_single_joint() {
        let tree = KinematicTree::new(
            vec![None],
            vec![Vector3::x()],
            vec![0.0],
            vec![[0.0; body_model::SHAPE_DIM]],
        )
        .unwrap();
        // The lone root sits at the origin, so use a two-joint chain and weight only the child.
        let tree = tree.with_joint(0, Vector3::new(0.6, 0.8, 0.0), 2.0, [0.0; 10]).unwrap();
        let mut params = FitParams::rest(2);
        params.camera = [1.7, 0.3, -0.4];
        let obs = Observation::new(vec![[0.0, 0.0], [0.5, 2.0]], vec![0.0, 0.8]).unwrap();
        let g = energy_grad_analytic(&tree, &params, &obs, &EnergyConfig::DATA_ONLY).unwrap();
        let (x, y) = (1.2, 1.6);
        let (s, tx, ty, w) = (1.7, 0.3, -0.4, 0.8);
        let want = 2.0 * w * (s * x + tx - 0.5) * x + 2.0 * w * (s * y + ty - 2.0) * y;
        assert_relative_eq!(g[6], want, max_relative = 1e-12);
    }

    #[test]
    fn coordinate_mode_is_exact_on_quadratic() {
        let g = central_difference(|x: &[f64]| Ok(x[0] * x[0]), &[1.0], 0.1, &[0]).unwrap();
        assert_relative_eq!(g[0], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn coordinate_mode_matches_analytic() {
        let cfg = EnergyConfig::default();
        let (tree, params, obs) = random_instance(7);
        let mut r = rng::seeded(0);
        let est = energy_grad_stochastic(&tree, &params, &obs, &cfg, 1e-5, StochasticMode::Coordinate, &mut r).unwrap();
        let exact = energy_grad_analytic(&tree, &params, &obs, &cfg).unwrap();
        assert!(rel_inf(&est, &exact) < 1e-3);
    }

    #[test]
    fn coordinate_error_shrinks_quadratically() {
        let cfg = EnergyConfig::default();
        let (tree, params, obs) = random_instance(8);
        let exact = energy_grad_analytic(&tree, &params, &obs, &cfg).unwrap();
        let mut r = rng::seeded(0);
        let errs: Vec<f64> = [1e-2, 1e-3]
            .iter()
            .map(|&d| {
                let est = energy_grad_stochastic(&tree, &params, &obs, &cfg, d, StochasticMode::Coordinate, &mut r).unwrap();
                est.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .collect();
        let ratio = errs[0] / errs[1];
        assert!((50.0..200.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn stochastic_rejects_nonpositive_delta() {
        let (tree, params, obs) = random_instance(9);
        let mut r = rng::seeded(0);
        for mode in [StochasticMode::Coordinate, StochasticMode::Simultaneous] {
            let got = energy_grad_stochastic(&tree, &params, &obs, &EnergyConfig::default(), 0.0, mode, &mut r);
            assert!(matches!(got, Err(Error::InvalidInput(_))));
        }
    }

    #[test]
    fn spsa_is_exact_in_one_dimension() {
        let mut r = rng::seeded(1);
        let g = spsa_estimate(|x: &[f64]| Ok(3.0 * x[0] * x[0]), &[2.0], 0.1, &[0], &mut r).unwrap();
        assert_relative_eq!(g[0], 12.0, max_relative = 1e-12);
    }
}
