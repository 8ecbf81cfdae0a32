//! Feedforward initializer and its first-order meta-training.
//!
//! The initializer maps an observation (flattened keypoints scaled by
//! [`COORD_SCALE`] followed by the confidences) through two tanh layers of
//! width [`HIDDEN`] to pose, shape and camera. Training simulates a few
//! refinement steps per task and pushes the combined loss gradient back
//! through the initial prediction only; the refinement itself is treated as
//! a constant.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::body_model::{self, FitParams, KinematicTree, SHAPE_BOUND, SHAPE_DIM};
use crate::energy::{self, backprop_joint_forces, EnergyConfig, Observation};
use crate::metrics;
use crate::optimizer::{self, OptimizerConfig};
use crate::rng::{self, Stream};
use crate::tasks::TaskRecord;
use crate::{map_tasks, Error, Result};

pub const HIDDEN: usize = 128;
/// Keypoint coordinates are divided by this before entering the network.
pub const COORD_SCALE: f64 = 5.0;
pub const ARCHITECTURE: &str = "mlp-tanh-128-128-softplus-scale";

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Layer {
            w: DMatrix::zeros(out, inp),
            b: DVector::zeros(out),
        }
    }

    fn glorot(out: usize, inp: usize, gain: f64, rng: &mut rng::Rng) -> Self {
        let limit = gain * (6.0 / (inp + out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        Layer {
            w: DMatrix::from_fn(out, inp, |_, _| dist.sample(rng)),
            b: DVector::zeros(out),
        }
    }
}

/// Three dense layers: input, two tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    joint_count: usize,
    layers: [Layer; 3],
}

/// Weight gradient with the same layout as a [`Regressor`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorGradient {
    layers: [Layer; 3],
}

impl RegressorGradient {
    fn zeros_like(reg: &Regressor) -> Self {
        RegressorGradient {
            layers: reg.layers.clone().map(|l| Layer::zeros(l.w.nrows(), l.w.ncols())),
        }
    }

    fn add_scaled(&mut self, other: &RegressorGradient, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w * factor;
            a.b += &b.b * factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.norm_squared() + l.b.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

struct Activations {
    input: DVector<f64>,
    h1: DVector<f64>,
    h2: DVector<f64>,
    out: DVector<f64>,
}

fn softplus(z: f64) -> f64 {
    let v = if z > 30.0 { z } else { z.exp().ln_1p() };
    v.max(f64::MIN_POSITIVE)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gradient of a scalar loss with respect to every entry of a [`FitParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub camera: [f64; 3],
}

impl ParamGradient {
    pub fn zeros(joint_count: usize) -> Self {
        ParamGradient {
            theta: vec![0.0; 3 * joint_count],
            beta: vec![0.0; SHAPE_DIM],
            camera: [0.0; 3],
        }
    }

    fn add_scaled(&mut self, theta: &[f64], beta: &[f64], camera: &[f64], factor: f64) {
        for (a, b) in self.theta.iter_mut().zip(theta) {
            *a += factor * b;
        }
        for (a, b) in self.beta.iter_mut().zip(beta) {
            *a += factor * b;
        }
        for (a, b) in self.camera.iter_mut().zip(camera) {
            *a += factor * b;
        }
    }
}

impl Regressor {
    /// Glorot-initialised network; the output layer starts ten times smaller.
    pub fn new(joint_count: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, Stream::Init, 0);
        let (i, o) = (3 * joint_count, Self::output_dim_for(joint_count));
        Regressor {
            joint_count,
            layers: [
                Layer::glorot(HIDDEN, i, 1.0, &mut r),
                Layer::glorot(HIDDEN, HIDDEN, 1.0, &mut r),
                Layer::glorot(o, HIDDEN, 0.1, &mut r),
            ],
        }
    }

    /// All weights and biases zero.
    pub fn zeros(joint_count: usize) -> Self {
        let (i, o) = (3 * joint_count, Self::output_dim_for(joint_count));
        Regressor {
            joint_count,
            layers: [Layer::zeros(HIDDEN, i), Layer::zeros(HIDDEN, HIDDEN), Layer::zeros(o, HIDDEN)],
        }
    }

    fn output_dim_for(joint_count: usize) -> usize {
        3 * joint_count + SHAPE_DIM + 3
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn input_dim(&self) -> usize {
        3 * self.joint_count
    }

    pub fn output_dim(&self) -> usize {
        Self::output_dim_for(self.joint_count)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Network input for `obs`: scaled coordinates, then confidences.
    pub fn features(&self, obs: &Observation) -> Result<DVector<f64>> {
        if obs.len() != self.joint_count {
            return Err(Error::InvalidInput(format!(
                "regressor expects {} keypoints, got {}",
                self.joint_count,
                obs.len()
            )));
        }
        let mut x = DVector::zeros(self.input_dim());
        for (j, u) in obs.keypoints().iter().enumerate() {
            x[2 * j] = u[0] / COORD_SCALE;
            x[2 * j + 1] = u[1] / COORD_SCALE;
        }
        for (j, w) in obs.weights().iter().enumerate() {
            x[2 * self.joint_count + j] = *w;
        }
        Ok(x)
    }

    fn forward(&self, input: DVector<f64>) -> Activations {
        let [l1, l2, l3] = &self.layers;
        let h1 = (&l1.w * &input + &l1.b).map(f64::tanh);
        let h2 = (&l2.w * &h1 + &l2.b).map(f64::tanh);
        let out = &l3.w * &h2 + &l3.b;
        Activations { input, h1, h2, out }
    }

    /// Raw network output before the camera-scale softplus and shape clamp.
    pub fn raw_output(&self, obs: &Observation) -> Result<DVector<f64>> {
        Ok(self.forward(self.features(obs)?).out)
    }

    fn decode(&self, out: &DVector<f64>) -> FitParams {
        let n = 3 * self.joint_count;
        let theta = out.as_slice()[..n].to_vec();
        let beta = out.as_slice()[n..n + SHAPE_DIM]
            .iter()
            .map(|b| b.clamp(-SHAPE_BOUND, SHAPE_BOUND))
            .collect();
        let c = n + SHAPE_DIM;
        FitParams {
            theta,
            beta,
            camera: [softplus(out[c]), out[c + 1], out[c + 2]],
        }
    }

    /// Initial fit for `obs`.
    pub fn regress(&self, obs: &Observation) -> Result<FitParams> {
        let act = self.forward(self.features(obs)?);
        Ok(self.decode(&act.out))
    }

    /// Weight gradient of `grad . regress(obs)`.
    pub fn backprop(&self, obs: &Observation, grad: &ParamGradient) -> Result<RegressorGradient> {
        let act = self.forward(self.features(obs)?);
        Ok(self.backprop_from(&act, grad))
    }

    fn backprop_from(&self, act: &Activations, grad: &ParamGradient) -> RegressorGradient {
        let n = 3 * self.joint_count;
        let c = n + SHAPE_DIM;
        let mut dz = DVector::zeros(self.output_dim());
        dz.as_mut_slice()[..n].copy_from_slice(&grad.theta);
        for (m, g) in grad.beta.iter().enumerate() {
            if act.out[n + m].abs() < SHAPE_BOUND {
                dz[n + m] = *g;
            }
        }
        dz[c] = grad.camera[0] * sigmoid(act.out[c]);
        dz[c + 1] = grad.camera[1];
        dz[c + 2] = grad.camera[2];

        let [_, l2, l3] = &self.layers;
        let g3 = Layer {
            w: &dz * act.h2.transpose(),
            b: dz.clone(),
        };
        let d2 = (l3.w.tr_mul(&dz)).component_mul(&act.h2.map(|h| 1.0 - h * h));
        let g2 = Layer {
            w: &d2 * act.h1.transpose(),
            b: d2.clone(),
        };
        let d1 = (l2.w.tr_mul(&d2)).component_mul(&act.h1.map(|h| 1.0 - h * h));
        let g1 = Layer {
            w: &d1 * act.input.transpose(),
            b: d1,
        };
        RegressorGradient { layers: [g1, g2, g3] }
    }

    /// `phi <- phi - lr * grad`.
    pub fn apply_gradient(&mut self, grad: &RegressorGradient, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.w -= &g.w * lr;
            l.b -= &g.b * lr;
        }
    }

    /// Mutable view of one weight, addressed as (layer, row, col); `col ==
    /// inputs` addresses the bias.
    pub fn weight_mut(&mut self, layer: usize, row: usize, col: usize) -> &mut f64 {
        let l = &mut self.layers[layer];
        if col == l.w.ncols() {
            &mut l.b[row]
        } else {
            &mut l.w[(row, col)]
        }
    }

    pub fn gradient_entry(grad: &RegressorGradient, layer: usize, row: usize, col: usize) -> f64 {
        let l = &grad.layers[layer];
        if col == l.w.ncols() {
            l.b[row]
        } else {
            l.w[(row, col)]
        }
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint {
        Checkpoint {
            architecture: ARCHITECTURE.into(),
            weights: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    weight: l.w.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    bias: l.b.iter().copied().collect(),
                })
                .collect(),
            seed,
            epoch,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.architecture != ARCHITECTURE {
            return Err(Error::InvalidInput(format!("unknown architecture {:?}", ck.architecture)));
        }
        let inputs = ck.weights.first().and_then(|l| l.weight.first()).map_or(0, |r| r.len());
        if inputs == 0 || inputs % 3 != 0 {
            return Err(Error::InvalidInput(format!("input width {inputs} is not 3 per joint")));
        }
        let j = inputs / 3;
        let shapes = [(HIDDEN, 3 * j), (HIDDEN, HIDDEN), (Self::output_dim_for(j), HIDDEN)];
        if ck.weights.len() != 3 {
            return Err(Error::InvalidInput(format!("expected 3 layers, got {}", ck.weights.len())));
        }
        let mut layers = Vec::with_capacity(3);
        for (k, (lw, &(rows, cols))) in ck.weights.iter().zip(&shapes).enumerate() {
            if lw.weight.len() != rows || lw.bias.len() != rows || lw.weight.iter().any(|r| r.len() != cols) {
                return Err(Error::InvalidInput(format!("layer {k} does not have shape {rows}x{cols}")));
            }
            let w = DMatrix::from_fn(rows, cols, |r, c| lw.weight[r][c]);
            let b = DVector::from_column_slice(&lw.bias);
            layers.push(Layer { w, b });
        }
        let layers: [Layer; 3] = layers.try_into().expect("three layers");
        let reg = Regressor { joint_count: j, layers };
        if !reg.is_finite() {
            return Err(Error::InvalidInput("checkpoint contains non-finite weights".into()));
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path, seed: u64, epoch: usize) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(seed, epoch))
            .map_err(|e| Error::json("checkpoint", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// Row-major, one row per output unit.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Serialized regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: String,
    pub weights: Vec<LayerWeights>,
    pub seed: u64,
    pub epoch: usize,
}

/// Which loss drives the initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Simulated refinement with final and decayed intermediate supervision.
    Meta,
    /// Final 3D loss on the initial prediction only.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub intermediate_weight: f64,
    pub intermediate_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_steps: 3,
            outer_lr: 1e-4,
            intermediate_weight: 0.1,
            intermediate_decay: 0.5,
            batch_size: 32,
            epochs: 75,
            seed: 0,
            mode: TrainMode::Meta,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == TrainMode::Meta && self.inner_steps == 0 {
            return Err(Error::InvalidConfig("inner_steps must be at least 1".into()));
        }
        if !(self.outer_lr >= 0.0) || !self.outer_lr.is_finite() {
            return Err(Error::InvalidConfig("outer_lr must be finite and >= 0".into()));
        }
        if !(self.intermediate_weight >= 0.0) || !self.intermediate_weight.is_finite() {
            return Err(Error::InvalidConfig("intermediate_weight must be finite and >= 0".into()));
        }
        if !(self.intermediate_decay > 0.0 && self.intermediate_decay <= 1.0) {
            return Err(Error::InvalidConfig("intermediate_decay must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Weight of the intermediate loss at step `t`.
    pub fn step_weight(&self, t: usize) -> f64 {
        self.intermediate_weight * self.intermediate_decay.powi(t as i32)
    }
}

/// Loss breakdown of one task or the mean over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub final_loss: f64,
    pub intermediate_losses: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    fn assemble(final_loss: f64, intermediate_losses: Vec<f64>, cfg: &MetaConfig) -> Self {
        let total = final_loss
            + intermediate_losses
                .iter()
                .enumerate()
                .map(|(t, l)| cfg.step_weight(t) * l)
                .sum::<f64>();
        LossReport {
            final_loss,
            intermediate_losses,
            total,
        }
    }

    fn mean(reports: &[LossReport], cfg: &MetaConfig) -> Self {
        let n = reports.len() as f64;
        let steps = reports.iter().map(|r| r.intermediate_losses.len()).max().unwrap_or(0);
        let final_loss = reports.iter().map(|r| r.final_loss).sum::<f64>() / n;
        let inter = (0..steps)
            .map(|t| reports.iter().map(|r| r.intermediate_losses.get(t).copied().unwrap_or(0.0)).sum::<f64>() / n)
            .collect();
        Self::assemble(final_loss, inter, cfg)
    }
}

/// Mean squared 3D joint error between `params` and the task's ground truth.
pub fn final_loss(tree: &KinematicTree, params: &FitParams, task: &TaskRecord) -> Result<f64> {
    Ok(final_loss_and_gradient(tree, params, task)?.0)
}

/// [`final_loss`] and its gradient with respect to pose and shape.
pub fn final_loss_and_gradient(
    tree: &KinematicTree,
    params: &FitParams,
    task: &TaskRecord,
) -> Result<(f64, ParamGradient)> {
    let posed = body_model::pose(tree, params)?;
    let target = body_model::forward_kinematics(tree, &task.gt)?;
    let j = tree.joint_count() as f64;
    let mut loss = 0.0;
    let forces: Vec<Vector3<f64>> = posed
        .positions
        .iter()
        .zip(&target)
        .map(|(p, q)| {
            let d = p - q;
            loss += d.norm_squared();
            d * (2.0 / j)
        })
        .collect();
    let (theta, beta) = backprop_joint_forces(tree, params, &posed, &forces);
    Ok((
        loss / j,
        ParamGradient {
            theta,
            beta,
            camera: [0.0; 3],
        },
    ))
}

fn projection_loss_and_gradient(
    tree: &KinematicTree,
    params: &FitParams,
    obs: &Observation,
) -> Result<(f64, energy::FullGradient)> {
    energy::energy_and_gradient(tree, params, obs, &EnergyConfig::DATA_ONLY)
}

fn inner_config(ocfg: &OptimizerConfig, mcfg: &MetaConfig) -> OptimizerConfig {
    OptimizerConfig {
        max_iters: mcfg.inner_steps,
        early_stop: false,
        ..ocfg.clone()
    }
}

/// Simulated refinement from `init`: `T + 1` states and the loss breakdown.
///
/// Runs stopped early by an empty active set are padded with their last state.
pub fn inner_loop_from<R: rand::Rng + ?Sized>(
    tree: &KinematicTree,
    init: &FitParams,
    task: &TaskRecord,
    ecfg: &EnergyConfig,
    ocfg: &OptimizerConfig,
    mcfg: &MetaConfig,
    rng: &mut R,
) -> Result<(Vec<FitParams>, LossReport)> {
    let steps = mcfg.inner_steps;
    let mut trajectory = if steps == 0 {
        vec![init.clone()]
    } else {
        optimizer::refine(tree, init, &task.obs, ecfg, &inner_config(ocfg, mcfg), rng)?.path
    };
    while trajectory.len() < steps + 1 {
        let last = trajectory.last().expect("starts non-empty").clone();
        trajectory.push(last);
    }
    let intermediate = trajectory[..steps]
        .iter()
        .map(|p| energy::data_term(tree, p, &task.obs))
        .collect::<Result<Vec<_>>>()?;
    let last = final_loss(tree, &trajectory[steps], task)?;
    Ok((trajectory, LossReport::assemble(last, intermediate, mcfg)))
}

/// [`inner_loop_from`] starting at the regressor's prediction.
pub fn inner_loop<R: rand::Rng + ?Sized>(
    reg: &Regressor,
    tree: &KinematicTree,
    task: &TaskRecord,
    ecfg: &EnergyConfig,
    ocfg: &OptimizerConfig,
    mcfg: &MetaConfig,
    rng: &mut R,
) -> Result<(Vec<FitParams>, LossReport)> {
    let init = reg.regress(&task.obs)?;
    inner_loop_from(tree, &init, task, ecfg, ocfg, mcfg, rng)
}

/// First-order gradient of the training loss with respect to the initial prediction.
pub fn initial_gradient(
    tree: &KinematicTree,
    trajectory: &[FitParams],
    task: &TaskRecord,
    mcfg: &MetaConfig,
) -> Result<ParamGradient> {
    let steps = trajectory.len() - 1;
    let (_, mut grad) = final_loss_and_gradient(tree, &trajectory[steps], task)?;
    if mcfg.mode == TrainMode::Meta {
        for (t, params) in trajectory[..steps].iter().enumerate() {
            let (_, g) = projection_loss_and_gradient(tree, params, &task.obs)?;
            grad.add_scaled(&g.theta, &g.beta, &g.camera, mcfg.step_weight(t));
        }
    }
    Ok(grad)
}

fn task_gradient(
    reg: &Regressor,
    tree: &KinematicTree,
    task: &TaskRecord,
    ecfg: &EnergyConfig,
    ocfg: &OptimizerConfig,
    mcfg: &MetaConfig,
    stream_seed: u64,
) -> Result<(RegressorGradient, LossReport)> {
    let act = reg.forward(reg.features(&task.obs)?);
    let init = reg.decode(&act.out);
    let (trajectory, report) = match mcfg.mode {
        TrainMode::Meta => {
            let mut r = rng::stream(stream_seed, Stream::Inner, task.id);
            inner_loop_from(tree, &init, task, ecfg, ocfg, mcfg, &mut r)?
        }
        TrainMode::Direct => {
            let l = final_loss(tree, &init, task)?;
            (vec![init], LossReport::assemble(l, Vec::new(), mcfg))
        }
    };
    let grad = initial_gradient(tree, &trajectory, task, mcfg)?;
    Ok((reg.backprop_from(&act, &grad), report))
}

/// One averaged first-order update over `batch`.
///
/// Per-task work may run in parallel; gradients are summed in task-id order.
pub fn outer_step<R: rand::Rng + ?Sized>(
    reg: &Regressor,
    tree: &KinematicTree,
    batch: &[&TaskRecord],
    ecfg: &EnergyConfig,
    ocfg: &OptimizerConfig,
    mcfg: &MetaConfig,
    rng: &mut R,
) -> Result<(Regressor, LossReport)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("outer step needs a non-empty batch".into()));
    }
    mcfg.validate()?;
    let stream_seed: u64 = rng.gen();
    let mut ordered: Vec<&TaskRecord> = batch.to_vec();
    ordered.sort_by_key(|t| t.id);
    let results = map_tasks(&ordered, |task| task_gradient(reg, tree, task, ecfg, ocfg, mcfg, stream_seed));
    let mut total = RegressorGradient::zeros_like(reg);
    let mut reports = Vec::with_capacity(ordered.len());
    let n = ordered.len() as f64;
    for res in results {
        let (g, report) = res?;
        total.add_scaled(&g, 1.0 / n);
        reports.push(report);
    }
    if !total.is_finite() {
        return Err(Error::TrainingDivergence("non-finite outer gradient".into()));
    }
    let mut next = reg.clone();
    next.apply_gradient(&total, mcfg.outer_lr);
    if !next.is_finite() {
        return Err(Error::TrainingDivergence("non-finite weights after outer step".into()));
    }
    Ok((next, LossReport::mean(&reports, mcfg)))
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean_final_loss: f64,
    pub mean_heldout_mpjpe: f64,
}

/// Mean joint error after full refinement from the regressor's predictions.
pub fn heldout_error(
    reg: &Regressor,
    tree: &KinematicTree,
    tasks: &[TaskRecord],
    ecfg: &EnergyConfig,
    ocfg: &OptimizerConfig,
    seed: u64,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("held-out set is empty".into()));
    }
    let errors = map_tasks(tasks, |task| {
        let init = reg.regress(&task.obs)?;
        let mut r = rng::stream(seed, Stream::Refine, task.id);
        let out = optimizer::refine(tree, &init, &task.obs, ecfg, ocfg, &mut r)?;
        metrics::mpjpe(
            &body_model::forward_kinematics(tree, &out.params)?,
            &body_model::forward_kinematics(tree, &task.gt)?,
        )
    });
    let errors = errors.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Permutation of `0..len` visited in `epoch`; batches are consecutive chunks.
///
/// Drawn from the shuffle stream only, so inner-loop sampling never changes batch membership.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Shuffle, epoch as u64));
    order
}

/// Everything needed to train one initializer.
pub struct TrainingSetup<'a> {
    pub tree: &'a KinematicTree,
    pub train: &'a [TaskRecord],
    pub heldout: &'a [TaskRecord],
    pub ecfg: &'a EnergyConfig,
    pub ocfg: &'a OptimizerConfig,
    pub mcfg: &'a MetaConfig,
}

/// Trains `reg` for `mcfg.epochs` epochs; `on_epoch` sees each accepted epoch.
///
/// On error the last regressor handed to `on_epoch` is the last good one.
pub fn meta_train_with<F>(reg: &Regressor, setup: &TrainingSetup, mut on_epoch: F) -> Result<(Regressor, Vec<CurvePoint>)>
where
    F: FnMut(&Regressor, &CurvePoint) -> Result<()>,
{
    let TrainingSetup {
        tree,
        train,
        heldout,
        ecfg,
        ocfg,
        mcfg,
    } = *setup;
    mcfg.validate()?;
    ocfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut reg = reg.clone();
    let mut curve = Vec::with_capacity(mcfg.epochs);
    for epoch in 0..mcfg.epochs {
        let order: Vec<&TaskRecord> = epoch_order(train.len(), mcfg.seed, epoch).into_iter().map(|i| &train[i]).collect();
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(mcfg.batch_size).enumerate() {
            let mut inner = rng::stream(mcfg.seed, Stream::Inner, ((epoch as u64) << 32) | b as u64);
            let (next, report) = outer_step(&reg, tree, batch, ecfg, ocfg, mcfg, &mut inner)?;
            reg = next;
            loss_sum += report.final_loss * batch.len() as f64;
        }
        let point = CurvePoint {
            epoch,
            mean_final_loss: loss_sum / train.len() as f64,
            mean_heldout_mpjpe: if heldout.is_empty() {
                0.0
            } else {
                heldout_error(&reg, tree, heldout, ecfg, ocfg, mcfg.seed)?
            },
        };
        on_epoch(&reg, &point)?;
        curve.push(point);
    }
    Ok((reg, curve))
}

/// [`meta_train_with`] without an epoch callback.
pub fn meta_train(reg: &Regressor, setup: &TrainingSetup) -> Result<(Regressor, Vec<CurvePoint>)> {
    meta_train_with(reg, setup, |_, _| Ok(()))
}
