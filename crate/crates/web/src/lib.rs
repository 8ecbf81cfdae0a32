//! Browser bindings: sample a fitting task, refine it, and return everything
//! the page needs to draw the skeleton and the energy and sigma curves.

use metafit::body_model;
use metafit::energy::{self, EnergyConfig};
use metafit::metrics;
use metafit::optimizer::{self, OptimizerConfig, UpdateRule};
use metafit::rng::{self, Stream};
use metafit::tasks::{self, DomainProfile, TaskRecord};
use metafit::{FitParams, KinematicTree};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Observation and ground truth in image coordinates.
#[derive(Debug, Serialize)]
pub struct Scene {
    pub parents: Vec<i32>,
    pub keypoints: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub truth: Vec<[f64; 2]>,
    pub domain: String,
}

#[derive(Debug, Serialize)]
pub struct Step {
    pub energy: f64,
    pub mean_sigma: f64,
    pub active_count: usize,
}

/// One refinement run, with the projected skeleton after every iteration.
#[derive(Debug, Serialize)]
pub struct Run {
    pub frames: Vec<Vec<[f64; 2]>>,
    pub initial_energy: f64,
    pub steps: Vec<Step>,
    /// Mean final sigma of each joint's three rotation parameters.
    pub joint_sigma: Vec<f64>,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub stop_reason: String,
}

#[wasm_bindgen]
pub struct Demo {
    tree: KinematicTree,
    task: TaskRecord,
    init: FitParams,
}

impl Demo {
    pub fn sample(seed: u64, profile: &str, perturb: f64) -> metafit::Result<Demo> {
        let profile = DomainProfile::builtin(profile)
            .ok_or_else(|| metafit::Error::InvalidInput(format!("unknown profile {profile:?}")))?;
        let tree = KinematicTree::default_human();
        let task = tasks::sample_task(&tree, &profile, seed, &mut rng::stream(seed, Stream::Tasks, 0))?;
        let mut r = rng::stream(seed, Stream::Perturb, 0);
        let mut init = task.gt.clone();
        for j in 0..init.joint_count() {
            let d: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut r));
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..3 {
                init.theta[3 * j + k] += perturb * d[k] / n;
            }
        }
        Ok(Demo { tree, task, init })
    }

    pub fn scene_data(&self) -> metafit::Result<Scene> {
        Ok(Scene {
            parents: self.tree.parents().iter().map(|p| p.map_or(-1, |p| p as i32)).collect(),
            keypoints: self.task.obs.keypoints().to_vec(),
            weights: self.task.obs.weights().to_vec(),
            truth: energy::project_joints(&self.tree, &self.task.gt)?,
            domain: self.task.domain.clone(),
        })
    }

    pub fn run(&self, adaptive: bool, caching: bool, max_iters: usize, seed: u64) -> metafit::Result<Run> {
        let ocfg = OptimizerConfig {
            update_rule: if adaptive { UpdateRule::Adaptive } else { UpdateRule::Deterministic },
            caching,
            max_iters,
            ..OptimizerConfig::default()
        };
        let ecfg = EnergyConfig::default();
        let mut r = rng::stream(seed, Stream::Refine, 0);
        let out = optimizer::refine(&self.tree, &self.init, &self.task.obs, &ecfg, &ocfg, &mut r)?;
        let frames = out
            .path
            .iter()
            .map(|p| energy::project_joints(&self.tree, p))
            .collect::<metafit::Result<_>>()?;
        let pred = body_model::forward_kinematics(&self.tree, &out.params)?;
        let gt = body_model::forward_kinematics(&self.tree, &self.task.gt)?;
        Ok(Run {
            frames,
            initial_energy: out.initial_energy,
            steps: out
                .trace
                .iter()
                .map(|t| Step {
                    energy: t.energy,
                    mean_sigma: t.mean_sigma,
                    active_count: t.active_count,
                })
                .collect(),
            joint_sigma: out.uncertainty[..3 * self.tree.joint_count()]
                .chunks(3)
                .map(|c| c.iter().sum::<f64>() / 3.0)
                .collect(),
            mpjpe: metrics::mpjpe(&pred, &gt)?,
            pa_mpjpe: metrics::pa_mpjpe(&pred, &gt)?,
            stop_reason: out.stop_reason.as_str().into(),
        })
    }
}

fn js<T: Serialize>(v: metafit::Result<T>) -> Result<String, JsError> {
    let v = v.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
impl Demo {
    /// Samples a task from a built-in profile ("clean" or "hard") and starts
    /// from its ground truth with every joint turned by `perturb` radians.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, profile: &str, perturb: f64) -> Result<Demo, JsError> {
        Demo::sample(seed, profile, perturb).map_err(|e| JsError::new(&e.to_string()))
    }

    /// JSON [`Scene`].
    pub fn scene(&self) -> Result<String, JsError> {
        js(self.scene_data())
    }

    /// Refines from the perturbed start; JSON [`Run`].
    pub fn refine(&self, adaptive: bool, caching: bool, max_iters: usize, seed: u64) -> Result<String, JsError> {
        js(self.run(adaptive, caching, max_iters, seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_matches_tree() {
        let demo = Demo::sample(3, "hard", 0.1).unwrap();
        let s = demo.scene_data().unwrap();
        assert_eq!(s.parents.len(), 24);
        assert_eq!(s.parents[0], -1);
        assert!(s.parents.iter().skip(1).enumerate().all(|(j, &p)| p >= 0 && (p as usize) <= j));
        assert_eq!(s.keypoints.len(), 24);
        assert_eq!(s.truth.len(), 24);
        assert_eq!(s.domain, "hard");
        assert!(Demo::sample(3, "foggy", 0.1).is_err());
    }

    #[test]
    fn run_reports_one_frame_per_iteration() {
        let demo = Demo::sample(5, "clean", 0.05).unwrap();
        let run = demo.run(true, true, 15, 1).unwrap();
        assert_eq!(run.frames.len(), run.steps.len() + 1);
        assert_eq!(run.joint_sigma.len(), 24);
        assert!(run.pa_mpjpe <= run.mpjpe);
        assert!(run.steps.last().unwrap().energy < run.initial_energy);
        let again = demo.run(true, true, 15, 1).unwrap();
        assert_eq!(serde_json::to_string(&run).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn baseline_keeps_every_parameter_active() {
        let demo = Demo::sample(5, "clean", 0.05).unwrap();
        let run = demo.run(false, false, 15, 1).unwrap();
        assert!(run.steps.iter().all(|s| s.active_count == 75));
    }
}
