//! Articulated kinematic chain: a shape-parameterised joint tree driven by
//! per-joint axis-angle rotations.
//!
//! Joint `j` sits at `position[parent[j]] + G[parent[j]] * (length[j] * rest_offset[j])`
//! where `G[i]` is the global rotation of joint `i` (the product of the local
//! rotations along the path from the root to `i`, inclusive). A joint's own
//! rotation therefore moves only its descendants, and the root sits at the
//! origin.

use nalgebra::{Matrix3, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Number of shape coefficients.
pub const SHAPE_DIM: usize = 10;

/// Bound on `|beta|_inf` for which every bone length must stay positive.
pub const SHAPE_BOUND: f64 = 3.0;

/// Below this rotation angle `rodrigues` switches to its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Model units per centimetre in the built-in skeleton.
pub const CM_TO_UNIT: f64 = 0.07;

/// Skeleton topology, rest geometry and linear shape basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTree", into = "RawTree")]
pub struct KinematicTree {
    parent: Vec<Option<usize>>,
    rest_offset: Vec<Vector3<f64>>,
    base_length: Vec<f64>,
    shape_basis: Vec<[f64; SHAPE_DIM]>,
}

#[derive(Serialize, Deserialize)]
struct RawTree {
    joint_count: usize,
    parent: Vec<Option<usize>>,
    rest_offset: Vec<[f64; 3]>,
    base_length: Vec<f64>,
    shape_basis: Vec<Vec<f64>>,
}

impl TryFrom<RawTree> for KinematicTree {
    type Error = Error;

    fn try_from(raw: RawTree) -> Result<Self> {
        let j = raw.joint_count;
        if raw.parent.len() != j
            || raw.rest_offset.len() != j
            || raw.base_length.len() != j
            || raw.shape_basis.len() != j
        {
            return Err(Error::InvalidInput(format!(
                "tree arrays must all have joint_count = {j} entries"
            )));
        }
        let mut basis = Vec::with_capacity(j);
        for (idx, row) in raw.shape_basis.into_iter().enumerate() {
            let row: [f64; SHAPE_DIM] = row.try_into().map_err(|r: Vec<f64>| {
                Error::InvalidInput(format!(
                    "shape_basis row {idx} has {} entries, expected {SHAPE_DIM}",
                    r.len()
                ))
            })?;
            basis.push(row);
        }
        KinematicTree::new(
            raw.parent,
            raw.rest_offset.into_iter().map(Vector3::from).collect(),
            raw.base_length,
            basis,
        )
    }
}

impl From<KinematicTree> for RawTree {
    fn from(tree: KinematicTree) -> Self {
        RawTree {
            joint_count: tree.joint_count(),
            parent: tree.parent,
            rest_offset: tree.rest_offset.iter().map(|v| [v.x, v.y, v.z]).collect(),
            base_length: tree.base_length,
            shape_basis: tree.shape_basis.iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl KinematicTree {
    /// Builds and validates a tree.
    ///
    /// Joints must be topologically ordered (`parent[j] < j`), joint 0 is the
    /// only root, rest offsets of non-root joints have unit norm and every
    /// non-root bone stays strictly positive for all shapes with
    /// `|beta|_inf <= 3`. The root carries no bone; its length and offset are
    /// ignored by forward kinematics.
    pub fn new(
        parent: Vec<Option<usize>>,
        rest_offset: Vec<Vector3<f64>>,
        base_length: Vec<f64>,
        shape_basis: Vec<[f64; SHAPE_DIM]>,
    ) -> Result<Self> {
        let j = parent.len();
        if j == 0 {
            return Err(Error::InvalidInput("tree needs at least one joint".into()));
        }
        if rest_offset.len() != j || base_length.len() != j || shape_basis.len() != j {
            return Err(Error::InvalidInput("tree arrays differ in length".into()));
        }
        if parent[0].is_some() {
            return Err(Error::InvalidInput("joint 0 must be the root".into()));
        }
        for (idx, p) in parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < idx => {}
                Some(p) => {
                    return Err(Error::InvalidInput(format!(
                        "joint {idx} has parent {p}; parents must precede children"
                    )))
                }
                None => {
                    return Err(Error::InvalidInput(format!(
                        "joint {idx} has no parent; only joint 0 may be a root"
                    )))
                }
            }
        }
        let finite = rest_offset.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && base_length.iter().all(|x| x.is_finite())
            && shape_basis.iter().all(|r| r.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidInput("tree contains non-finite values".into()));
        }
        for idx in 1..j {
            let n = rest_offset[idx].norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "rest_offset[{idx}] has norm {n}, expected 1"
                )));
            }
            if base_length[idx] < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "base_length[{idx}] is negative"
                )));
            }
            // Worst case over the box |beta|_inf <= SHAPE_BOUND.
            let swing: f64 = shape_basis[idx].iter().map(|b| b.abs()).sum::<f64>() * SHAPE_BOUND;
            let worst = base_length[idx] - swing;
            if worst <= 0.0 {
                return Err(Error::DegenerateShape {
                    joint: idx,
                    length: worst,
                });
            }
        }
        Ok(KinematicTree {
            parent,
            rest_offset,
            base_length,
            shape_basis,
        })
    }

    /// Built-in 24-joint human-like skeleton.
    ///
    /// The table below lists lengths in centimetres; one model unit is
    /// `1 / CM_TO_UNIT` centimetres (about 14 cm), so the whole body is roughly
    /// 12 units tall. The shape basis is drawn once from a fixed seed so the
    /// tree is identical everywhere.
    pub fn default_human() -> Self {
        // (parent, direction, length in cm)
        #[rustfmt::skip]
        let layout: [(Option<usize>, [f64; 3], f64); 24] = [
            (None,     [0.0, 1.0, 0.0], 0.0),   // 0 pelvis
            (Some(0),  [1.0, -0.9, 0.0], 11.0), // 1 left hip
            (Some(0),  [-1.0, -0.9, 0.0], 11.0),// 2 right hip
            (Some(0),  [0.0, 1.0, -0.1], 11.0), // 3 spine 1
            (Some(1),  [0.0, -1.0, 0.05], 38.0),// 4 left knee
            (Some(2),  [0.0, -1.0, 0.05], 38.0),// 5 right knee
            (Some(3),  [0.0, 1.0, 0.05], 13.0), // 6 spine 2
            (Some(4),  [0.0, -1.0, -0.1], 40.0),// 7 left ankle
            (Some(5),  [0.0, -1.0, -0.1], 40.0),// 8 right ankle
            (Some(6),  [0.0, 1.0, 0.0], 6.0),   // 9 spine 3
            (Some(7),  [0.0, -0.3, 1.0], 12.0), // 10 left foot
            (Some(8),  [0.0, -0.3, 1.0], 12.0), // 11 right foot
            (Some(9),  [0.0, 1.0, 0.1], 21.0),  // 12 neck
            (Some(9),  [1.0, 0.6, 0.0], 8.0),   // 13 left collar
            (Some(9),  [-1.0, 0.6, 0.0], 8.0),  // 14 right collar
            (Some(12), [0.0, 1.0, 0.2], 9.0),   // 15 head
            (Some(13), [1.0, -0.1, 0.0], 12.0), // 16 left shoulder
            (Some(14), [-1.0, -0.1, 0.0], 12.0),// 17 right shoulder
            (Some(16), [1.0, 0.0, -0.05], 26.0),// 18 left elbow
            (Some(17), [-1.0, 0.0, -0.05], 26.0),// 19 right elbow
            (Some(18), [1.0, 0.0, 0.05], 25.0), // 20 left wrist
            (Some(19), [-1.0, 0.0, 0.05], 25.0),// 21 right wrist
            (Some(20), [1.0, -0.1, 0.0], 8.0),  // 22 left hand
            (Some(21), [-1.0, -0.1, 0.0], 8.0), // 23 right hand
        ];
        let mut gen = rng::stream(0x5eed, Stream::Tree, 0);
        let mut parent = Vec::with_capacity(24);
        let mut offsets = Vec::with_capacity(24);
        let mut lengths = Vec::with_capacity(24);
        let mut basis = Vec::with_capacity(24);
        for (p, dir, len) in layout {
            parent.push(p);
            offsets.push(Vector3::from(dir).normalize());
            let len = len * CM_TO_UNIT;
            lengths.push(len);
            let mut row = [0.0; SHAPE_DIM];
            if p.is_some() {
                // Per-coefficient effect of a few percent of the bone length.
                for b in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut gen);
                    *b = 0.02 * len * z.clamp(-2.5, 2.5);
                }
            }
            basis.push(row);
        }
        // Mirror-symmetric shape effects keep the two body halves alike.
        for (l, r) in [(1, 2), (4, 5), (7, 8), (10, 11), (13, 14), (16, 17), (18, 19), (20, 21), (22, 23)] {
            basis[r] = basis[l];
        }
        KinematicTree::new(parent, offsets, lengths, basis).expect("built-in tree is valid")
    }

    /// Same topology with every length and shape effect multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidInput(format!("scale factor must be positive, got {factor}")));
        }
        KinematicTree::new(
            self.parent.clone(),
            self.rest_offset.clone(),
            self.base_length.iter().map(|l| l * factor).collect(),
            self.shape_basis.iter().map(|r| r.map(|b| b * factor)).collect(),
        )
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn rest_offset(&self, joint: usize) -> Vector3<f64> {
        self.rest_offset[joint]
    }

    pub fn base_lengths(&self) -> &[f64] {
        &self.base_length
    }

    pub fn shape_basis(&self) -> &[[f64; SHAPE_DIM]] {
        &self.shape_basis
    }

    /// Number of pose-plus-camera parameters refined at test time.
    pub fn refine_dim(&self) -> usize {
        3 * self.joint_count() + 3
    }

    /// Joints without children.
    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.joint_count()];
        for p in self.parent.iter().flatten() {
            has_child[*p] = true;
        }
        (0..self.joint_count()).filter(|&j| !has_child[j]).collect()
    }

    /// Returns a copy of the tree with one extra joint attached.
    pub fn with_joint(
        &self,
        parent: usize,
        rest_offset: Vector3<f64>,
        length: f64,
        shape_row: [f64; SHAPE_DIM],
    ) -> Result<Self> {
        let mut p = self.parent.clone();
        let mut o = self.rest_offset.clone();
        let mut l = self.base_length.clone();
        let mut b = self.shape_basis.clone();
        p.push(Some(parent));
        o.push(rest_offset);
        l.push(length);
        b.push(shape_row);
        KinematicTree::new(p, o, l, b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("kinematic tree", e))
    }
}

/// The optimisation variable: pose, shape and weak-perspective camera.
///
/// Flat refinement indices `0..3J` address pose (joint-major, xyz), and
/// `3J..3J+3` address the camera `[s, t_x, t_y]`. Shape is never part of the
/// flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub camera: [f64; 3],
}

impl FitParams {
    /// Zero pose, mean shape, unit-scale camera at the origin.
    pub fn rest(joint_count: usize) -> Self {
        FitParams {
            theta: vec![0.0; 3 * joint_count],
            beta: vec![0.0; SHAPE_DIM],
            camera: [1.0, 0.0, 0.0],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.theta.len() / 3
    }

    pub fn joint_rotation(&self, joint: usize) -> Vector3<f64> {
        Vector3::new(
            self.theta[3 * joint],
            self.theta[3 * joint + 1],
            self.theta[3 * joint + 2],
        )
    }

    pub fn check(&self, tree: &KinematicTree) -> Result<()> {
        let j = tree.joint_count();
        if self.theta.len() != 3 * j {
            return Err(Error::InvalidInput(format!(
                "theta has {} entries, expected {}",
                self.theta.len(),
                3 * j
            )));
        }
        if self.beta.len() != SHAPE_DIM {
            return Err(Error::InvalidInput(format!(
                "beta has {} entries, expected {SHAPE_DIM}",
                self.beta.len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.beta).chain(&self.camera).all(|x| x.is_finite())
    }

    /// Pose followed by camera.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.theta.len() + 3);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.camera);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.theta.len();
        assert_eq!(flat.len(), n + 3, "flat parameter length");
        self.theta.copy_from_slice(&flat[..n]);
        self.camera.copy_from_slice(&flat[n..]);
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut p = self.clone();
        p.set_flat(flat);
        p
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axis-angle vector to rotation matrix.
pub fn rodrigues(axis_angle: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !axis_angle.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("non-finite axis-angle".into()));
    }
    Ok(rodrigues_unchecked(axis_angle))
}

pub(crate) fn rodrigues_unchecked(v: &Vector3<f64>) -> Matrix3<f64> {
    let angle = v.norm();
    let k = skew(v);
    if angle < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Matrix3::identity() + a * k + b * k * k
}

/// Left Jacobian of the exponential map: `dR/dv_c * R^T = [J e_c]_x`.
pub(crate) fn left_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let angle = v.norm();
    let k = skew(v);
    let (a, b) = if angle < 1e-4 {
        let a2 = angle * angle;
        (0.5 - a2 / 24.0, 1.0 / 6.0 - a2 / 120.0)
    } else {
        let a2 = angle * angle;
        ((1.0 - angle.cos()) / a2, (angle - angle.sin()) / (a2 * angle))
    };
    Matrix3::identity() + a * k + b * k * k
}

/// Bone lengths `base + B beta`.
pub fn bone_lengths(tree: &KinematicTree, beta: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != SHAPE_DIM {
        return Err(Error::InvalidInput(format!(
            "beta has {} entries, expected {SHAPE_DIM}",
            beta.len()
        )));
    }
    let lengths = bone_lengths_unchecked(tree, beta);
    for (joint, &length) in lengths.iter().enumerate().skip(1) {
        if !(length > 0.0) {
            return Err(Error::DegenerateShape { joint, length });
        }
    }
    Ok(lengths)
}

fn bone_lengths_unchecked(tree: &KinematicTree, beta: &[f64]) -> Vec<f64> {
    tree.base_length
        .iter()
        .zip(&tree.shape_basis)
        .map(|(base, row)| base + row.iter().zip(beta).map(|(b, x)| b * x).sum::<f64>())
        .collect()
}

/// Everything the gradient code needs from one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Posed {
    pub positions: Vec<Vector3<f64>>,
    pub global: Vec<Matrix3<f64>>,
}

pub(crate) fn pose(tree: &KinematicTree, params: &FitParams) -> Result<Posed> {
    params.check(tree)?;
    if !params.theta.iter().chain(&params.beta).all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("non-finite pose or shape".into()));
    }
    let lengths = bone_lengths(tree, &params.beta)?;
    let j = tree.joint_count();
    let mut positions = Vec::with_capacity(j);
    let mut global: Vec<Matrix3<f64>> = Vec::with_capacity(j);
    for idx in 0..j {
        let local = rodrigues_unchecked(&params.joint_rotation(idx));
        match tree.parent[idx] {
            None => {
                positions.push(Vector3::zeros());
                global.push(local);
            }
            Some(p) => {
                let pos = positions[p] + global[p] * (tree.rest_offset[idx] * lengths[idx]);
                positions.push(pos);
                global.push(global[p] * local);
            }
        }
    }
    Ok(Posed { positions, global })
}

/// 3D joint positions. The camera never enters.
pub fn forward_kinematics(tree: &KinematicTree, params: &FitParams) -> Result<Vec<Vector3<f64>>> {
    Ok(pose(tree, params)?.positions)
}
