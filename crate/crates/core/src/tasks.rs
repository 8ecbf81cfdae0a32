//! Seeded synthetic fitting tasks.
//!
//! A task is a ground-truth parameter set plus the noisy, partially
//! down-weighted 2D observation it produces under a [`DomainProfile`].

use std::io::{BufRead, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body_model::{self, FitParams, KinematicTree, SHAPE_BOUND, SHAPE_DIM};
use crate::energy::{self, Observation};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Observation statistics of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    /// Standard deviation of additive keypoint noise, projected units.
    pub keypoint_noise_std: f64,
    /// Probability that a keypoint's weight is drawn from `U(0, 0.2)`.
    pub occlusion_prob: f64,
    /// Standard deviation of each axis-angle component, radians.
    pub pose_spread: f64,
    pub camera_scale_range: [f64; 2],
}

impl DomainProfile {
    /// Low noise, no occlusion.
    pub fn clean() -> Self {
        DomainProfile {
            name: "clean".into(),
            keypoint_noise_std: 0.005,
            occlusion_prob: 0.0,
            pose_spread: 0.25,
            camera_scale_range: [0.9, 1.1],
        }
    }

    /// Noisier keypoints, frequent occlusion, wider poses and framing.
    pub fn hard() -> Self {
        DomainProfile {
            name: "hard".into(),
            keypoint_noise_std: 0.03,
            occlusion_prob: 0.3,
            pose_spread: 0.35,
            camera_scale_range: [0.7, 1.3],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "clean" => Some(Self::clean()),
            "hard" => Some(Self::hard()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.camera_scale_range;
        let ok = self.keypoint_noise_std.is_finite()
            && self.keypoint_noise_std >= 0.0
            && (0.0..=1.0).contains(&self.occlusion_prob)
            && self.pose_spread.is_finite()
            && self.pose_spread > 0.0
            && lo > 0.0
            && lo <= hi
            && hi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid domain profile {:?}", self.name)))
        }
    }
}

/// Ground truth plus the observation it generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub domain: String,
    pub gt: FitParams,
    pub obs: Observation,
}

fn truncated_normal<R: rand::Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= bound {
            return z;
        }
    }
}

/// Draws one task under `profile`.
pub fn sample_task<R: rand::Rng + ?Sized>(
    tree: &KinematicTree,
    profile: &DomainProfile,
    id: u64,
    rng: &mut R,
) -> Result<TaskRecord> {
    profile.validate()?;
    let j = tree.joint_count();
    let pose = Normal::new(0.0, profile.pose_spread).expect("validated spread");
    let theta: Vec<f64> = (0..3 * j).map(|_| pose.sample(rng)).collect();

    let mut beta = None;
    for _ in 0..100 {
        let b: Vec<f64> = (0..SHAPE_DIM).map(|_| truncated_normal(rng, SHAPE_BOUND)).collect();
        if body_model::bone_lengths(tree, &b).is_ok() {
            beta = Some(b);
            break;
        }
    }
    let beta = beta.ok_or_else(|| Error::DegenerateShape {
        joint: 0,
        length: 0.0,
    })?;

    let [lo, hi] = profile.camera_scale_range;
    let s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let shift = Normal::new(0.0, 0.1).expect("constant");
    let camera = [s, shift.sample(rng), shift.sample(rng)];
    let gt = FitParams { theta, beta, camera };

    let clean = energy::project_joints(tree, &gt)?;
    let keypoints: Vec<[f64; 2]> = if profile.keypoint_noise_std > 0.0 {
        let noise = Normal::new(0.0, profile.keypoint_noise_std).expect("validated noise");
        clean
            .iter()
            .map(|u| [u[0] + noise.sample(rng), u[1] + noise.sample(rng)])
            .collect()
    } else {
        clean
    };

    let weights = loop {
        let w: Vec<f64> = (0..j)
            .map(|_| {
                if rng.gen::<f64>() < profile.occlusion_prob {
                    rng.gen_range(0.0..0.2)
                } else {
                    1.0
                }
            })
            .collect();
        if w.iter().any(|&x| x > 0.0) {
            break w;
        }
    };

    Ok(TaskRecord {
        id,
        domain: profile.name.clone(),
        gt,
        obs: Observation::new(keypoints, weights)?,
    })
}

/// `count` tasks with ids `first_id..first_id + count`, one stream per task.
pub fn generate_dataset(
    tree: &KinematicTree,
    profile: &DomainProfile,
    count: usize,
    seed: u64,
) -> Result<Vec<TaskRecord>> {
    generate_dataset_from(tree, profile, count, seed, 0)
}

pub fn generate_dataset_from(
    tree: &KinematicTree,
    profile: &DomainProfile,
    count: usize,
    seed: u64,
    first_id: u64,
) -> Result<Vec<TaskRecord>> {
    if count == 0 {
        return Err(Error::InvalidInput("dataset count must be at least 1".into()));
    }
    (0..count as u64)
        .map(|i| {
            let id = first_id + i;
            let mut r = rng::stream(seed, Stream::Tasks, id);
            sample_task(tree, profile, id, &mut r)
        })
        .collect()
}

/// Train set from `source`, test set from `target`.
///
/// Test ids continue after the train ids so the two sets never share a
/// random stream.
pub fn domain_pair(
    tree: &KinematicTree,
    source: &DomainProfile,
    target: &DomainProfile,
    counts: (usize, usize),
    seed: u64,
) -> Result<(Vec<TaskRecord>, Vec<TaskRecord>)> {
    let train = generate_dataset_from(tree, source, counts.0, seed, 0)?;
    let test = generate_dataset_from(tree, target, counts.1, seed, counts.0 as u64)?;
    Ok((train, test))
}

pub fn write_tasks(path: &Path, tasks: &[TaskRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for task in tasks {
        let line = serde_json::to_string(task).map_err(|e| Error::json("task record", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyConfig;

    fn noiseless() -> DomainProfile {
        DomainProfile {
            name: "noiseless".into(),
            keypoint_noise_std: 0.0,
            occlusion_prob: 0.0,
            ..DomainProfile::clean()
        }
    }

    #[test]
    fn noiseless_task_has_zero_data_term() {
        let tree = KinematicTree::default_human();
        let task = sample_task(&tree, &noiseless(), 0, &mut rng::seeded(1)).unwrap();
        let d = energy::data_term(&tree, &task.gt, &task.obs).unwrap();
        assert!(d < 1e-20);
        let cfg = EnergyConfig::default();
        let e = energy::energy(&tree, &task.gt, &task.obs, &cfg).unwrap();
        let prior = cfg.lambda_pose * task.gt.theta[3..].iter().map(|t| t * t).sum::<f64>()
            + cfg.lambda_shape * task.gt.beta.iter().map(|b| b * b).sum::<f64>();
        assert!((e - prior).abs() < 1e-12 * prior.max(1.0));
    }

    #[test]
    fn seeded_tasks_repeat() {
        let tree = KinematicTree::default_human();
        let a = sample_task(&tree, &DomainProfile::hard(), 3, &mut rng::seeded(9)).unwrap();
        let b = sample_task(&tree, &DomainProfile::hard(), 3, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.gt.beta.iter().all(|b| b.abs() <= 3.0));
    }

    #[test]
    fn keypoint_noise_has_profile_std() {
        let tree = KinematicTree::default_human();
        let profile = DomainProfile {
            keypoint_noise_std: 0.7,
            ..noiseless()
        };
        let tasks = generate_dataset(&tree, &profile, 210, 4).unwrap();
        let mut sum2 = 0.0;
        let mut n = 0usize;
        for task in &tasks {
            let clean = energy::project_joints(&tree, &task.gt).unwrap();
            for (c, u) in clean.iter().zip(task.obs.keypoints()) {
                for a in 0..2 {
                    sum2 += (u[a] - c[a]).powi(2);
                    n += 1;
                }
            }
        }
        assert!(n >= 10_000);
        let std = (sum2 / n as f64).sqrt();
        assert!((std / 0.7 - 1.0).abs() < 0.03, "{std}");
    }

    #[test]
    fn occlusion_rate_matches_profile() {
        let tree = KinematicTree::default_human();
        let tasks = generate_dataset(&tree, &DomainProfile::hard(), 60, 5).unwrap();
        let weights: Vec<f64> = tasks.iter().flat_map(|t| t.obs.weights().to_vec()).collect();
        let rate = weights.iter().filter(|&&w| w < 1.0).count() as f64 / weights.len() as f64;
        assert!((rate - 0.3).abs() < 0.03, "{rate}");
        assert!(weights.iter().all(|&w| w == 1.0 || (0.0..0.2).contains(&w)));
    }

    #[test]
    fn dataset_ids_and_distinct_seeds() {
        let tree = KinematicTree::default_human();
        let one = generate_dataset(&tree, &DomainProfile::clean(), 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        let a = generate_dataset(&tree, &DomainProfile::clean(), 5, 1).unwrap();
        let b = generate_dataset(&tree, &DomainProfile::clean(), 5, 2).unwrap();
        assert_eq!(a.iter().map(|t| t.id).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        for (x, y) in a.iter().zip(&b) {
            assert_ne!(x.obs.keypoints(), y.obs.keypoints());
        }
        assert!(generate_dataset(&tree, &DomainProfile::clean(), 0, 1).is_err());
    }

    #[test]
    fn domain_pair_provenance() {
        let tree = KinematicTree::default_human();
        let (train, test) =
            domain_pair(&tree, &DomainProfile::clean(), &DomainProfile::hard(), (4, 3), 8).unwrap();
        assert!(train.iter().all(|t| t.domain == "clean"));
        assert!(test.iter().all(|t| t.domain == "hard"));
        assert_eq!(test[0].id, 4);
        let (_, same) = domain_pair(&tree, &DomainProfile::clean(), &DomainProfile::clean(), (4, 3), 8).unwrap();
        assert!(same.iter().all(|t| t.domain == "clean"));
    }

    #[test]
    fn jsonl_schema_and_roundtrip() {
        let tree = KinematicTree::default_human();
        let tasks = generate_dataset(&tree, &DomainProfile::hard(), 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_tasks(&path, &tasks).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["domain", "gt", "id", "obs"]);
        let mut gt: Vec<_> = first["gt"].as_object().unwrap().keys().cloned().collect();
        gt.sort();
        assert_eq!(gt, ["beta", "camera", "theta"]);
        let mut obs: Vec<_> = first["obs"].as_object().unwrap().keys().cloned().collect();
        obs.sort();
        assert_eq!(obs, ["keypoints", "weights"]);
        assert_eq!(read_tasks(&path).unwrap(), tasks);
        assert!(matches!(read_tasks(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
    }

    #[test]
    fn profile_validation() {
        assert!(DomainProfile::clean().validate().is_ok());
        let bad = DomainProfile {
            camera_scale_range: [2.0, 1.0],
            ..DomainProfile::clean()
        };
        assert!(bad.validate().is_err());
        assert_eq!(DomainProfile::builtin("hard"), Some(DomainProfile::hard()));
    }
}
