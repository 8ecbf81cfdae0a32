//! Experiment drivers behind the command-line harness.
//!
//! Every driver is a pure function of its [`ExperimentConfig`]: identical
//! configurations produce byte-identical output files. Wall-time is measured
//! per task but never written to disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::body_model::{self, KinematicTree};
use crate::energy::EnergyConfig;
use crate::meta::{self, CurvePoint, MetaConfig, Regressor, TrainMode, TrainingSetup};
use crate::metrics;
use crate::optimizer::{self, GradientMode, OptimizerConfig, StopReason, TraceRecord, UpdateRule};
use crate::rng::{self, Stream};
use crate::tasks::{self, DomainProfile, TaskRecord};
use crate::{map_tasks, Error, Result};

pub const TREE_FILE: &str = "tree.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SHIFT_FILE: &str = "shift.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const DOMAIN_SHIFT_FILE: &str = "domain_shift.csv";

/// Fixed standard deviations compared against adaptive variance.
pub const FIXED_SIGMAS: [f64; 2] = [0.01, 0.05];
/// Iteration budgets of the variance study.
pub const STEP_BUDGETS: [usize; 3] = [5, 10, 15];

/// Flat experiment configuration; every field is one key of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Tree JSON; the built-in skeleton when absent.
    pub tree: Option<PathBuf>,
    /// Task file used for training or fitting.
    pub tasks: Option<PathBuf>,
    /// Task file evaluated after every training epoch.
    pub heldout_tasks: Option<PathBuf>,
    /// Test tasks for `ablate`; generated from `source_profile` when absent.
    pub test_tasks: Option<PathBuf>,
    /// Target-domain tasks for `domain-shift`; generated when absent.
    pub shift_tasks: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub source_profile: String,
    pub target_profile: String,
    pub train_count: usize,
    pub test_count: usize,

    pub enable_meta: bool,
    pub enable_caching: bool,
    pub enable_adaptive_updates: bool,
    /// Replaces adaptive variance with this constant standard deviation.
    pub fixed_sigma: Option<f64>,

    pub lambda_pose: f64,
    pub lambda_shape: f64,

    pub alpha_base: f64,
    pub gamma: f64,
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
    pub fd_delta: f64,
    pub early_stop: bool,
    pub shape_step: Option<f64>,

    pub inner_steps: usize,
    pub outer_lr: f64,
    pub intermediate_weight: f64,
    pub intermediate_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        let m = MetaConfig::default();
        let e = EnergyConfig::default();
        ExperimentConfig {
            seed: 0,
            tree: None,
            tasks: None,
            heldout_tasks: None,
            test_tasks: None,
            shift_tasks: None,
            checkpoint: None,
            source_profile: "clean".into(),
            target_profile: "hard".into(),
            train_count: 500,
            test_count: 100,
            enable_meta: true,
            enable_caching: true,
            enable_adaptive_updates: true,
            fixed_sigma: None,
            lambda_pose: e.lambda_pose,
            lambda_shape: e.lambda_shape,
            alpha_base: o.alpha_base,
            gamma: o.gamma,
            epsilon_conv: o.epsilon_conv,
            kappa: o.kappa,
            epsilon_var: o.epsilon_var,
            sigma_min: o.sigma_min,
            sigma_max: o.sigma_max,
            beta_mu: o.beta_mu,
            beta_sigma: o.beta_sigma,
            max_iters: o.max_iters,
            success_window: o.success_window,
            gradient_mode: o.gradient_mode,
            fd_delta: o.fd_delta,
            early_stop: o.early_stop,
            shape_step: o.shape_step,
            inner_steps: m.inner_steps,
            outer_lr: m.outer_lr,
            intermediate_weight: m.intermediate_weight,
            intermediate_decay: m.intermediate_decay,
            batch_size: m.batch_size,
            epochs: m.epochs,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl ExperimentConfig {
    /// Builds a configuration from optional file text plus `key=value` overrides.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match text {
            Some(t) => t.parse::<toml::Table>().map_err(|e| invalid(e.to_string()))?,
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| invalid(format!("override `{item}` is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(invalid(format!("`{key}`: configuration is flat, tables are not allowed")));
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the config file at `path` (if any) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.source()?;
        self.target()?;
        if self.train_count == 0 || self.test_count == 0 {
            return Err(invalid("train_count and test_count must be positive"));
        }
        if let Some(s) = self.fixed_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("fixed_sigma must be positive, got {s}")));
            }
        }
        self.energy()
            .validate()
            .and_then(|_| self.optimizer().validate())
            .and_then(|_| self.meta().validate())
            .map_err(|e| match e {
                Error::InvalidInput(msg) => invalid(msg),
                other => other,
            })
    }

    pub fn source(&self) -> Result<DomainProfile> {
        DomainProfile::builtin(&self.source_profile)
            .ok_or_else(|| invalid(format!("unknown profile `{}`", self.source_profile)))
    }

    pub fn target(&self) -> Result<DomainProfile> {
        DomainProfile::builtin(&self.target_profile)
            .ok_or_else(|| invalid(format!("unknown profile `{}`", self.target_profile)))
    }

    pub fn energy(&self) -> EnergyConfig {
        EnergyConfig {
            lambda_pose: self.lambda_pose,
            lambda_shape: self.lambda_shape,
        }
    }

    /// Optimizer settings with the ablation flags applied.
    pub fn optimizer(&self) -> OptimizerConfig {
        let update_rule = if !self.enable_adaptive_updates {
            UpdateRule::Deterministic
        } else if let Some(s) = self.fixed_sigma {
            UpdateRule::FixedSigma(s)
        } else {
            UpdateRule::Adaptive
        };
        OptimizerConfig {
            alpha_base: self.alpha_base,
            gamma: self.gamma,
            epsilon_conv: self.epsilon_conv,
            kappa: self.kappa,
            epsilon_var: self.epsilon_var,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            beta_mu: self.beta_mu,
            beta_sigma: self.beta_sigma,
            max_iters: self.max_iters,
            success_window: self.success_window,
            gradient_mode: self.gradient_mode,
            fd_delta: self.fd_delta,
            caching: self.enable_caching,
            update_rule,
            early_stop: self.early_stop,
            shape_step: self.shape_step,
        }
    }

    pub fn meta(&self) -> MetaConfig {
        MetaConfig {
            inner_steps: self.inner_steps,
            outer_lr: self.outer_lr,
            intermediate_weight: self.intermediate_weight,
            intermediate_decay: self.intermediate_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            mode: if self.enable_meta { TrainMode::Meta } else { TrainMode::Direct },
        }
    }

    pub fn load_tree(&self) -> Result<KinematicTree> {
        match &self.tree {
            Some(p) => KinematicTree::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => Ok(KinematicTree::default_human()),
        }
    }

    fn required<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| invalid(format!("`{key}` must be set")))
    }
}

/// Outcome of refining one task.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub task_id: u64,
    pub trace: Vec<TraceRecord>,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mean_final_sigma: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub wall_time: Duration,
}

#[derive(Serialize)]
struct TraceRow {
    task_id: u64,
    t: usize,
    energy: f64,
    mean_sigma: f64,
    active_count: usize,
    update_norm: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    task_id: u64,
    mpjpe: f64,
    pa_mpjpe: f64,
    mean_final_sigma: f64,
    iterations: usize,
    stop_reason: &'static str,
}

/// One row of the ablation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `components` for the flag grid, `variance` for the fixed-sigma study.
    pub study: String,
    pub variant: String,
    pub enable_meta: bool,
    pub enable_caching: bool,
    pub enable_adaptive_updates: bool,
    /// `adaptive`, `none` (deterministic steps) or the fixed standard deviation.
    pub sigma: String,
    pub max_iters: usize,
    pub mean_mpjpe: f64,
    pub mean_pa_mpjpe: f64,
    pub median_mpjpe: f64,
    /// Median of the same configuration with adaptive variance at the same budget.
    pub adaptive_median_mpjpe: f64,
}

/// One row of the domain-shift report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub variant: String,
    pub source_mpjpe: f64,
    pub target_mpjpe: f64,
    pub delta_mpjpe: f64,
    pub source_pa_mpjpe: f64,
    pub target_pa_mpjpe: f64,
    pub delta_pa_mpjpe: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by one of the drivers.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Refines every task from the regressor's prediction.
///
/// Task `i` draws from `stream(seed, Refine, id)`, so records do not depend
/// on scheduling. Output follows input order.
pub fn evaluate(
    tree: &KinematicTree,
    reg: &Regressor,
    tasks: &[TaskRecord],
    ecfg: &EnergyConfig,
    ocfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    map_tasks(tasks, |task| {
        let start = Instant::now();
        let init = reg.regress(&task.obs)?;
        let mut r = rng::stream(seed, Stream::Refine, task.id);
        let out = optimizer::refine(tree, &init, &task.obs, ecfg, ocfg, &mut r)?;
        let pred = body_model::forward_kinematics(tree, &out.params)?;
        let gt = body_model::forward_kinematics(tree, &task.gt)?;
        Ok(RunRecord {
            task_id: task.id,
            mpjpe: metrics::mpjpe(&pred, &gt)?,
            pa_mpjpe: metrics::pa_mpjpe(&pred, &gt)?,
            mean_final_sigma: out.mean_uncertainty(),
            iterations: out.iterations_used,
            stop_reason: out.stop_reason,
            trace: out.trace,
            wall_time: start.elapsed(),
        })
    })
    .into_iter()
    .collect()
}

/// Writes `trace.csv` and `summary.csv` for `records`.
pub fn write_run_records(dir: &Path, records: &[RunRecord]) -> Result<()> {
    let trace: Vec<TraceRow> = records
        .iter()
        .flat_map(|r| {
            r.trace.iter().map(move |t| TraceRow {
                task_id: r.task_id,
                t: t.t,
                energy: t.energy,
                mean_sigma: t.mean_sigma,
                active_count: t.active_count,
                update_norm: t.update_norm,
            })
        })
        .collect();
    let summary: Vec<SummaryRow> = records
        .iter()
        .map(|r| SummaryRow {
            task_id: r.task_id,
            mpjpe: r.mpjpe,
            pa_mpjpe: r.pa_mpjpe,
            mean_final_sigma: r.mean_final_sigma,
            iterations: r.iterations,
            stop_reason: r.stop_reason.as_str(),
        })
        .collect();
    write_csv(&dir.join(TRACE_FILE), &trace)?;
    write_csv(&dir.join(SUMMARY_FILE), &summary)
}

/// Training tasks plus same-domain and target-domain test tasks.
pub struct Suites {
    pub train: Vec<TaskRecord>,
    pub test: Vec<TaskRecord>,
    pub shift: Vec<TaskRecord>,
}

/// Generates the three suites. The two test suites share ids and random
/// streams, so each target task is the source task seen under the target profile.
pub fn generate_suites(tree: &KinematicTree, cfg: &ExperimentConfig) -> Result<Suites> {
    let (train, test) = tasks::domain_pair(tree, &cfg.source()?, &cfg.source()?, (cfg.train_count, cfg.test_count), cfg.seed)?;
    let shift = tasks::generate_dataset_from(tree, &cfg.target()?, cfg.test_count, cfg.seed, cfg.train_count as u64)?;
    Ok(Suites { train, test, shift })
}

fn load_or(path: &Option<PathBuf>, generated: Vec<TaskRecord>) -> Result<Vec<TaskRecord>> {
    match path {
        Some(p) => tasks::read_tasks(p),
        None => Ok(generated),
    }
}

/// Uses task files from the config where given, generated suites otherwise.
pub fn resolve_suites(tree: &KinematicTree, cfg: &ExperimentConfig) -> Result<Suites> {
    let generated = generate_suites(tree, cfg)?;
    let suites = Suites {
        train: load_or(&cfg.tasks, generated.train)?,
        test: load_or(&cfg.test_tasks, generated.test)?,
        shift: load_or(&cfg.shift_tasks, generated.shift)?,
    };
    if suites.train.is_empty() || suites.test.is_empty() || suites.shift.is_empty() {
        return Err(Error::InvalidInput("task suites must be nonempty".into()));
    }
    Ok(suites)
}

/// `gen-tasks`: writes the tree and the three task suites.
pub fn run_gen_tasks(cfg: &ExperimentConfig, out: &Path) -> Result<Suites> {
    let tree = cfg.load_tree()?;
    let suites = generate_suites(&tree, cfg)?;
    create_dir(out)?;
    let tree_path = out.join(TREE_FILE);
    fs::write(&tree_path, tree.to_json()).map_err(|e| Error::io(&tree_path, e))?;
    tasks::write_tasks(&out.join(TRAIN_FILE), &suites.train)?;
    tasks::write_tasks(&out.join(TEST_FILE), &suites.test)?;
    tasks::write_tasks(&out.join(SHIFT_FILE), &suites.shift)?;
    Ok(suites)
}

/// Trains an initializer under the configuration's mode and optimizer.
pub fn train_regressor(
    tree: &KinematicTree,
    train: &[TaskRecord],
    heldout: &[TaskRecord],
    cfg: &ExperimentConfig,
) -> Result<(Regressor, Vec<CurvePoint>)> {
    let (ecfg, ocfg, mcfg) = (cfg.energy(), cfg.optimizer(), cfg.meta());
    let setup = TrainingSetup {
        tree,
        train,
        heldout,
        ecfg: &ecfg,
        ocfg: &ocfg,
        mcfg: &mcfg,
    };
    meta::meta_train(&Regressor::new(tree.joint_count(), cfg.seed), &setup)
}

/// `train`: writes `checkpoint.json` and `curve.csv`.
///
/// The checkpoint is rewritten after every epoch, so on divergence the file
/// holds the last good regressor and the error is returned.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CurvePoint>> {
    let tree = cfg.load_tree()?;
    let train = tasks::read_tasks(cfg.required(&cfg.tasks, "tasks")?)?;
    let heldout = tasks::read_tasks(cfg.required(&cfg.heldout_tasks, "heldout_tasks")?)?;
    create_dir(out)?;
    let (ecfg, ocfg, mcfg) = (cfg.energy(), cfg.optimizer(), cfg.meta());
    let ck = out.join(CHECKPOINT_FILE);
    let init = Regressor::new(tree.joint_count(), cfg.seed);
    init.save(&ck, cfg.seed, 0)?;
    let setup = TrainingSetup {
        tree: &tree,
        train: &train,
        heldout: &heldout,
        ecfg: &ecfg,
        ocfg: &ocfg,
        mcfg: &mcfg,
    };
    let mut curve = Vec::new();
    let result = meta::meta_train_with(&init, &setup, |reg, point| {
        curve.push(*point);
        reg.save(&ck, cfg.seed, point.epoch + 1)?;
        write_csv(&out.join(CURVE_FILE), &curve)
    });
    if result.is_err() && curve.is_empty() {
        write_csv(&out.join(CURVE_FILE), &curve)?;
    }
    result.map(|(_, curve)| curve)
}

/// `fit`: refines every task from the checkpoint's predictions.
pub fn run_fit(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunRecord>> {
    let tree = cfg.load_tree()?;
    let tasks = tasks::read_tasks(cfg.required(&cfg.tasks, "tasks")?)?;
    let (reg, _) = Regressor::load(cfg.required(&cfg.checkpoint, "checkpoint")?)?;
    if reg.joint_count() != tree.joint_count() {
        return Err(Error::InvalidInput("checkpoint and tree disagree on joint count".into()));
    }
    let records = evaluate(&tree, &reg, &tasks, &cfg.energy(), &cfg.optimizer(), cfg.seed)?;
    create_dir(out)?;
    write_run_records(out, &records)?;
    Ok(records)
}

fn variant_name(meta: bool, caching: bool, adaptive: bool) -> String {
    let parts: Vec<&str> = [(meta, "meta"), (caching, "caching"), (adaptive, "adaptive")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
    match parts.len() {
        0 => "baseline".into(),
        3 => "full".into(),
        _ => parts.join("+"),
    }
}

struct Scores {
    mean: f64,
    mean_pa: f64,
    median: f64,
}

fn score(records: &[RunRecord]) -> Scores {
    let e: Vec<f64> = records.iter().map(|r| r.mpjpe).collect();
    let pa: Vec<f64> = records.iter().map(|r| r.pa_mpjpe).collect();
    Scores {
        mean: mean(&e),
        mean_pa: mean(&pa),
        median: median(&e),
    }
}

/// Trains each distinct initializer once. Direct training ignores the
/// refinement settings, so every meta-off variant shares one regressor.
struct RegressorCache<'a> {
    tree: &'a KinematicTree,
    train: &'a [TaskRecord],
    trained: BTreeMap<String, Regressor>,
}

impl RegressorCache<'_> {
    fn get(&mut self, cfg: &ExperimentConfig) -> Result<Regressor> {
        let key = if cfg.enable_meta {
            format!("meta/{:?}/{}", cfg.optimizer().update_rule, cfg.enable_caching)
        } else {
            "direct".into()
        };
        if let Some(r) = self.trained.get(&key) {
            return Ok(r.clone());
        }
        let (reg, _) = train_regressor(self.tree, self.train, &[], cfg)?;
        self.trained.insert(key, reg.clone());
        Ok(reg)
    }
}

/// `ablate`: the 2x2x2 component grid plus the fixed-sigma study.
pub fn run_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let tree = cfg.load_tree()?;
    let suites = resolve_suites(&tree, cfg)?;
    let ecfg = cfg.energy();
    let mut cache = RegressorCache {
        tree: &tree,
        train: &suites.train,
        trained: BTreeMap::new(),
    };
    let mut medians: BTreeMap<(bool, bool, bool, String, usize), f64> = BTreeMap::new();
    let mut run = |c: &ExperimentConfig, sigma: String| -> Result<Scores> {
        let reg = cache.get(c)?;
        let s = score(&evaluate(&tree, &reg, &suites.test, &ecfg, &c.optimizer(), c.seed)?);
        medians.insert((c.enable_meta, c.enable_caching, c.enable_adaptive_updates, sigma, c.max_iters), s.median);
        Ok(s)
    };

    let mut grid = Vec::new();
    for meta in [true, false] {
        for caching in [true, false] {
            for adaptive in [true, false] {
                let c = ExperimentConfig {
                    enable_meta: meta,
                    enable_caching: caching,
                    enable_adaptive_updates: adaptive,
                    fixed_sigma: None,
                    ..cfg.clone()
                };
                let sigma = if adaptive { "adaptive" } else { "none" }.to_string();
                grid.push((c.clone(), sigma.clone(), run(&c, sigma)?));
            }
        }
    }
    let full = |budget: usize| ExperimentConfig {
        enable_meta: true,
        enable_caching: true,
        enable_adaptive_updates: true,
        fixed_sigma: None,
        max_iters: budget,
        ..cfg.clone()
    };
    let mut variance = Vec::new();
    for budget in STEP_BUDGETS {
        if budget != cfg.max_iters {
            run(&full(budget), "adaptive".into())?;
        }
        for s in FIXED_SIGMAS {
            let c = ExperimentConfig {
                fixed_sigma: Some(s),
                ..full(budget)
            };
            variance.push((c.clone(), s.to_string(), run(&c, s.to_string())?));
        }
    }

    let row = |study: &str, c: &ExperimentConfig, sigma: String, s: &Scores, adaptive_key| AblationRow {
        study: study.into(),
        variant: match c.fixed_sigma {
            Some(v) => format!("fixed-sigma-{v}"),
            None => variant_name(c.enable_meta, c.enable_caching, c.enable_adaptive_updates),
        },
        enable_meta: c.enable_meta,
        enable_caching: c.enable_caching,
        enable_adaptive_updates: c.enable_adaptive_updates,
        sigma,
        max_iters: c.max_iters,
        mean_mpjpe: s.mean,
        mean_pa_mpjpe: s.mean_pa,
        median_mpjpe: s.median,
        adaptive_median_mpjpe: medians[&adaptive_key],
    };
    let mut rows = Vec::new();
    for (c, sigma, s) in &grid {
        let key = (c.enable_meta, c.enable_caching, true, "adaptive".to_string(), c.max_iters);
        rows.push(row("components", c, sigma.clone(), s, key));
    }
    for (c, sigma, s) in &variance {
        let key = (true, true, true, "adaptive".to_string(), c.max_iters);
        rows.push(row("variance", c, sigma.clone(), s, key));
    }
    create_dir(out)?;
    write_csv(&out.join(ABLATION_FILE), &rows)?;
    Ok(rows)
}

/// `domain-shift`: trains on the source profile and reports the error
/// increase on the target profile for the full system and two ablations.
pub fn run_domain_shift(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ShiftRow>> {
    let tree = cfg.load_tree()?;
    let suites = resolve_suites(&tree, cfg)?;
    let ecfg = cfg.energy();
    let mut cache = RegressorCache {
        tree: &tree,
        train: &suites.train,
        trained: BTreeMap::new(),
    };
    let variants = [("full", true, true), ("no-meta", false, true), ("no-adaptive", true, false)];
    let mut rows = Vec::new();
    for (name, meta, adaptive) in variants {
        let c = ExperimentConfig {
            enable_meta: meta,
            enable_caching: true,
            enable_adaptive_updates: adaptive,
            ..cfg.clone()
        };
        let reg = cache.get(&c)?;
        let src = score(&evaluate(&tree, &reg, &suites.test, &ecfg, &c.optimizer(), c.seed)?);
        let tgt = score(&evaluate(&tree, &reg, &suites.shift, &ecfg, &c.optimizer(), c.seed)?);
        rows.push(ShiftRow {
            variant: name.into(),
            source_mpjpe: src.mean,
            target_mpjpe: tgt.mean,
            delta_mpjpe: tgt.mean - src.mean,
            source_pa_mpjpe: src.mean_pa,
            target_pa_mpjpe: tgt.mean_pa,
            delta_pa_mpjpe: tgt.mean_pa - src.mean_pa,
        });
    }
    create_dir(out)?;
    write_csv(&out.join(DOMAIN_SHIFT_FILE), &rows)?;
    Ok(rows)
}
