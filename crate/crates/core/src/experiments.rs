//! Adaptation tasks, method comparisons, ν sweeps, the adaptability probe
//! and run archives.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apanet::{
    draw_rotations, images_to_tensor, rotate_batch, ApanetError, ApanetModel, LabeledBatch, Method, StepBatch,
    TrainConfig, Trainer,
};
use crate::autodiff::{AdamState, Shape, Tape, Tensor};
use crate::config::{ConfigError, KeyValues};
use crate::geometry::{median, median_of_error_pairs, norm3, sub3, ErrorPair, ImageRotation, Pose, Quaternion};
use crate::synth::{generate_scene, Observation, Raster, SceneConfig, SceneDataset, SynthError};

/// The shipped two-scene task used by the acceptance suite.
pub const STANDARD_TASK: &str = include_str!("../../../configs/standard_task.cfg");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] ApanetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed archive {path}:{line}: {msg}")]
    Archive { path: String, line: usize, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseMode {
    /// Absolute poses in the scene frame.
    Ape,
    /// Poses relative to the nearest anchor image.
    Rpe,
}

impl FromStr for PoseMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ape" => Ok(Self::Ape),
            "rpe" => Ok(Self::Rpe),
            _ => Err(format!("unknown pose mode `{s}`")),
        }
    }
}

impl std::fmt::Display for PoseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ape => "ape",
            Self::Rpe => "rpe",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationTask {
    pub name: String,
    pub sources: Vec<SceneDataset>,
    pub target: SceneDataset,
    pub mode: PoseMode,
    pub anchor_stride: usize,
}

impl AdaptationTask {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.sources.is_empty() {
            return Err(ExperimentError::InvalidTask("at least one source scene is required".into()));
        }
        if self.anchor_stride == 0 {
            return Err(ExperimentError::InvalidTask("anchor_stride must be at least 1".into()));
        }
        let g = self.target.config.image_size;
        if self.sources.iter().any(|s| s.config.image_size != g) {
            return Err(ExperimentError::InvalidTask("all scenes must share one image size".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let g = self.target.config.image_size;
        g * g
    }

    /// Git-style SHA-256 of every pose and raster in the task.
    pub fn content_hash(&self) -> String {
        let mut body = Vec::new();
        for ds in self.sources.iter().chain([&self.target]) {
            for o in ds.train.iter().chain(&ds.test) {
                for v in o.pose.to_array().iter().chain(&o.image.data) {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(&body);
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Scene and task description read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub name: String,
    pub mode: PoseMode,
    pub anchor_stride: usize,
    pub sources: Vec<SceneConfig>,
    pub target: SceneConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: "pair".into(),
            mode: PoseMode::Ape,
            anchor_stride: 10,
            sources: vec![SceneConfig::default()],
            target: SceneConfig { seed: 1, pose_center: [100.0, 0.0, 0.0], ..SceneConfig::default() },
        }
    }
}

/// Seeds, ν grid and parallelism of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub nu_values: Vec<f64>,
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2, 3, 4], nu_values: vec![0.01, 0.05, 0.2, 0.5, 0.9], jobs: 1 }
    }
}

/// Complete configuration of an experiment run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn standard() -> Self {
        Self::from_key_values(&KeyValues::parse(STANDARD_TASK).expect("shipped config parses")).expect("shipped config is valid")
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ConfigError> {
        let mut task = TaskConfig::default();
        kv.read_into("task", "name", &mut task.name)?;
        kv.read_into("task", "mode", &mut task.mode)?;
        kv.read_into("task", "anchor_stride", &mut task.anchor_stride)?;
        let mut n_sources = 1usize;
        kv.read_into("task", "n_sources", &mut n_sources)?;
        // `[scene]` holds values shared by every scene unless overridden.
        let base = SceneConfig::from_key_values(kv, "scene", SceneConfig::default())?;
        task.sources = (0..n_sources)
            .map(|i| {
                let mut b = base.clone();
                b.seed = base.seed + 2 * i as u64;
                SceneConfig::from_key_values(kv, &format!("source.{i}"), b)
            })
            .collect::<Result<_, _>>()?;
        let tb = SceneConfig { seed: base.seed + 1, pose_center: [100.0, 0.0, 0.0], ..base.clone() };
        task.target = SceneConfig::from_key_values(kv, "target", tb)?;
        let train = TrainConfig::from_key_values(kv, TrainConfig::default())?;
        let mut sweep = SweepConfig::default();
        if let Some(v) = kv.read_list("experiment", "seeds")? {
            sweep.seeds = v;
        }
        if let Some(v) = kv.read_list("experiment", "nu_values")? {
            sweep.nu_values = v;
        }
        kv.read_into("experiment", "jobs", &mut sweep.jobs)?;
        Ok(Self { task, train, sweep })
    }

    /// Rejects keys that no configuration field reads.
    pub fn check_keys(kv: &KeyValues) -> Result<(), ConfigError> {
        let known = Self::default().to_key_values();
        let scene_keys: Vec<&str> = known.keys("target").map(|(k, _)| k).collect();
        for section in kv.sections() {
            let is_scene = section == "scene" || section == "target" || section.strip_prefix("source.").is_some_and(|n| n.parse::<usize>().is_ok());
            for (key, _) in kv.keys(section) {
                let ok = if is_scene { scene_keys.contains(&key) } else { known.get(section, key).is_some() };
                if !ok {
                    return Err(ConfigError::UnknownKey(format!("{section}.{key}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("task", "name", self.task.name.clone());
        kv.set("task", "mode", self.task.mode.to_string());
        kv.set("task", "anchor_stride", self.task.anchor_stride.to_string());
        kv.set("task", "n_sources", self.task.sources.len().to_string());
        for (i, s) in self.task.sources.iter().enumerate() {
            s.to_key_values(&mut kv, &format!("source.{i}"));
        }
        self.task.target.to_key_values(&mut kv, "target");
        self.train.to_key_values(&mut kv);
        let join = |v: Vec<String>| v.join(",");
        kv.set("experiment", "seeds", join(self.sweep.seeds.iter().map(u64::to_string).collect()));
        kv.set("experiment", "nu_values", join(self.sweep.nu_values.iter().map(f64::to_string).collect()));
        kv.set("experiment", "jobs", self.sweep.jobs.to_string());
        kv
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = self.to_key_values().to_string();
        hex(&Sha256::digest(text.as_bytes()))[..12].to_string()
    }

    pub fn build_task(&self) -> Result<AdaptationTask, ExperimentError> {
        build_task(&self.task)
    }
}

pub fn build_task(cfg: &TaskConfig) -> Result<AdaptationTask, ExperimentError> {
    let sources = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| generate_scene(s).map(|d| d.with_scene_id(i as u32)))
        .collect::<Result<Vec<_>, _>>()?;
    let target = generate_scene(&cfg.target)?.with_scene_id(cfg.sources.len() as u32);
    let task = AdaptationTask { name: cfg.name.clone(), sources, target, mode: cfg.mode, anchor_stride: cfg.anchor_stride };
    task.validate()?;
    Ok(task)
}

/// Copy of `ds` whose orientation labels are shuffled among its train
/// observations and, separately, among its test observations.
pub fn permute_orientations(ds: &SceneDataset, seed: u64) -> SceneDataset {
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(21);
    for split in [&mut out.train, &mut out.test] {
        let mut qs: Vec<Quaternion> = split.iter().map(|o| o.pose.q).collect();
        qs.shuffle(&mut rng);
        for (o, q) in split.iter_mut().zip(qs) {
            o.pose.q = q;
        }
    }
    out
}

/// A training or evaluation sample with its anchor (RPE only).
#[derive(Debug, Clone, Copy)]
struct Sample<'a> {
    obs: &'a Observation,
    anchor: Option<Pose>,
}

impl Sample<'_> {
    fn target(&self, k: ImageRotation) -> Pose {
        let p = self.obs.pose.rotate_image(k);
        match self.anchor {
            None => p,
            Some(a) => a.relative_to_frame(&p),
        }
    }

    fn to_absolute(&self, pred: &Pose) -> Pose {
        match self.anchor {
            None => *pred,
            Some(a) => a.compose(pred),
        }
    }
}

fn anchors_of(ds: &SceneDataset, stride: usize) -> Vec<Pose> {
    ds.train.iter().step_by(stride).map(|o| o.pose).collect()
}

fn nearest_anchor(anchors: &[Pose], p: &Pose) -> Pose {
    *anchors
        .iter()
        .min_by(|a, b| norm3(sub3(a.t, p.t)).total_cmp(&norm3(sub3(b.t, p.t))))
        .expect("at least one anchor")
}

fn samples<'a>(obs: &'a [Observation], anchors: Option<&[Pose]>) -> Vec<Sample<'a>> {
    obs.iter().map(|o| Sample { obs: o, anchor: anchors.map(|a| nearest_anchor(a, &o.pose)) }).collect()
}

/// Endless shuffled pass over `0..n`.
#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One prediction with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub predicted: Pose,
    pub truth: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub mode: PoseMode,
    pub method: Method,
    pub nu: f64,
    pub seed: u64,
    pub target_error: ErrorPair,
    pub source_error: ErrorPair,
    /// Epoch means of the total loss.
    pub loss_curve: Vec<f64>,
    /// Epoch means of the discriminator batch accuracy; `None` when the
    /// discriminator was not trained.
    pub disc_accuracy_curve: Vec<Option<f64>>,
    pub epochs_run: usize,
    pub wall_clock_s: f64,
    pub input_hash: String,
    pub config: String,
    #[serde(skip)]
    pub target_predictions: Vec<PredictionRecord>,
    #[serde(skip)]
    pub source_predictions: Vec<PredictionRecord>,
}

impl RunReport {
    pub fn run_id(&self) -> String {
        format!("{}_{}_nu{}_seed{}", self.task, self.method, self.nu, self.seed)
    }
}

/// A finished run with its model, for probes that need the features.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub report: RunReport,
    pub model: ApanetModel,
}

fn errors_of(preds: &[PredictionRecord]) -> ErrorPair {
    let errs: Vec<ErrorPair> = preds.iter().map(|p| p.predicted.errors_against(&p.truth)).collect();
    median_of_error_pairs(&errs).unwrap_or(ErrorPair { position_error: f64::NAN, orientation_error: f64::NAN })
}

fn evaluate(model: &ApanetModel, set: &[Sample]) -> Result<Vec<PredictionRecord>, ExperimentError> {
    let images = images_to_tensor(set.iter().map(|s| &s.obs.image));
    let preds = model.predict_batch(&images)?;
    Ok(set
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(index, (s, p))| PredictionRecord { index, predicted: s.to_absolute(&p), truth: s.obs.pose })
        .collect())
}

const BATCH_STREAM: u64 = 11;
const LABELED_SUBSET_STREAM: u64 = 13;

/// Indices of the labeled target subset `D_t^a`, `round(ν·n_t)` of them.
/// The subset for a smaller ν is a prefix of the subset for a larger one.
pub fn labeled_subset(n_t: usize, nu: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LABELED_SUBSET_STREAM);
    let mut idx: Vec<usize> = (0..n_t).collect();
    idx.shuffle(&mut rng);
    idx.truncate((nu * n_t as f64).round() as usize);
    idx
}

/// Trains `method` on `task` and evaluates it on both test sets.
pub fn train_method(task: &AdaptationTask, method: Method, config: &TrainConfig) -> Result<TrainedRun, ExperimentError> {
    task.validate()?;
    let start = Instant::now();
    let cfg = TrainConfig { method, ..config.clone() };
    let mut trainer = Trainer::new(&cfg, task.input_dim())?;
    let settings = trainer.settings;
    let rpe = task.mode == PoseMode::Rpe;

    let source_anchors: Vec<Vec<Pose>> = task.sources.iter().map(|s| anchors_of(s, task.anchor_stride)).collect();
    let target_anchors = anchors_of(&task.target, task.anchor_stride);
    let src_train: Vec<Vec<Sample>> = task
        .sources
        .iter()
        .zip(&source_anchors)
        .map(|(s, a)| samples(&s.train, rpe.then_some(a.as_slice())))
        .collect();
    let tgt_train = samples(&task.target.train, rpe.then_some(target_anchors.as_slice()));
    let labeled = labeled_subset(tgt_train.len(), settings.nu, cfg.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(BATCH_STREAM);
    let mut src_cyclers: Vec<Cycler> = src_train.iter().map(|s| Cycler::new(s.len(), &mut rng)).collect();
    let mut tgt_cycler = Cycler::new(tgt_train.len(), &mut rng);
    let mut lab_cycler = Cycler::new(labeled.len(), &mut rng);

    let n_source: usize = src_train.iter().map(Vec::len).sum();
    let b = cfg.batch_size;
    let steps_per_epoch = n_source.div_ceil(b).max(1);
    let mut loss_curve = Vec::new();
    let mut disc_curve = Vec::new();

    let labeled_batch = |picked: &[Sample], rng: &mut ChaCha8Rng| -> LabeledBatch {
        let images: Vec<&Raster> = picked.iter().map(|s| &s.obs.image).collect();
        let rotations = if settings.self_supervised {
            draw_rotations(rng, picked.len(), cfg.rotation_prob)
        } else {
            vec![ImageRotation::R0; picked.len()]
        };
        rotate_batch(&images, &rotations, |i, k| picked[i].target(k))
    };

    for _epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut acc_n = 0usize;
        for _ in 0..steps_per_epoch {
            // Source scenes contribute equally to each batch.
            let src: Vec<Sample> = (0..b)
                .map(|i| {
                    let s = i % src_train.len();
                    src_train[s][src_cyclers[s].next(&mut rng)]
                })
                .collect();
            let unl: Vec<&Raster> = (0..b).map(|_| &tgt_train[tgt_cycler.next(&mut rng)].obs.image).collect();
            let lab: Vec<Sample> = if labeled.is_empty() {
                Vec::new()
            } else {
                (0..b).map(|_| tgt_train[labeled[lab_cycler.next(&mut rng)]]).collect()
            };
            let source = labeled_batch(&src, &mut rng);
            let disc_source = settings.self_supervised.then(|| images_to_tensor(src.iter().map(|s| &s.obs.image)));
            let target_labeled = (!lab.is_empty()).then(|| labeled_batch(&lab, &mut rng));
            let batch = StepBatch { source, target_labeled, target_unlabeled: images_to_tensor(unl), disc_source };
            let r = trainer.train_step(&batch)?;
            loss_sum += r.total_loss;
            if !r.disc_accuracy.is_nan() {
                acc_sum += r.disc_accuracy;
                acc_n += 1;
            }
        }
        loss_curve.push(loss_sum / steps_per_epoch as f64);
        disc_curve.push((acc_n > 0).then(|| acc_sum / acc_n as f64));
        if cfg.early_stop && plateaued(&loss_curve, 10, 1e-4) {
            break;
        }
    }

    let model = trainer.model;
    let tgt_test = samples(&task.target.test, rpe.then_some(target_anchors.as_slice()));
    let target_predictions = evaluate(&model, &tgt_test)?;
    let src_test: Vec<Sample> = task
        .sources
        .iter()
        .zip(&source_anchors)
        .flat_map(|(s, a)| samples(&s.test, rpe.then_some(a.as_slice())))
        .collect();
    let source_predictions = evaluate(&model, &src_test)?;
    let mut kv = KeyValues::default();
    cfg.to_key_values(&mut kv);
    let report = RunReport {
        task: task.name.clone(),
        mode: task.mode,
        method,
        nu: settings.nu,
        seed: cfg.seed,
        target_error: errors_of(&target_predictions),
        source_error: errors_of(&source_predictions),
        epochs_run: loss_curve.len(),
        loss_curve,
        disc_accuracy_curve: disc_curve,
        wall_clock_s: start.elapsed().as_secs_f64(),
        input_hash: task.content_hash(),
        config: kv.to_string(),
        target_predictions,
        source_predictions,
    };
    Ok(TrainedRun { report, model })
}

/// True when the best value of the last `window` epochs improves on the
/// best value before them by less than `tol` (relative).
pub fn plateaued(curve: &[f64], window: usize, tol: f64) -> bool {
    if curve.len() <= window {
        return false;
    }
    let (old, recent) = curve.split_at(curve.len() - window);
    let best_old = old.iter().copied().fold(f64::INFINITY, f64::min);
    let best_new = recent.iter().copied().fold(f64::INFINITY, f64::min);
    best_old - best_new < tol * best_old.abs().max(1e-12)
}

pub fn run_method(task: &AdaptationTask, method: Method, config: &TrainConfig) -> Result<RunReport, ExperimentError> {
    train_method(task, method, config).map(|r| r.report)
}

/// Runs independent cells on up to `jobs` threads, returning results in
/// input order.
pub fn run_cells<C, T, F>(cells: &[C], jobs: usize, f: F) -> Vec<T>
where
    C: Sync,
    T: Send,
    F: Fn(&C) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| cells.par_iter().map(&f).collect());
        }
    }
    let _ = jobs;
    cells.iter().map(f).collect()
}

/// All five methods, one run per seed.
pub fn compare_methods(
    task: &AdaptationTask,
    methods: &[Method],
    config: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<TrainedRun>, ExperimentError> {
    let cells: Vec<(Method, u64)> = methods.iter().flat_map(|m| seeds.iter().map(move |s| (*m, *s))).collect();
    run_cells(&cells, jobs, |(m, s)| train_method(task, *m, &TrainConfig { seed: *s, ..config.clone() }))
        .into_iter()
        .collect()
}

/// One run per `(method, ν, seed)` over `methods` (default ss, apanet,
/// apanets), ordered by method, then ν, then seed.
pub fn nu_sweep(
    task: &AdaptationTask,
    nus: &[f64],
    methods: &[Method],
    config: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunReport>, ExperimentError> {
    if let Some(bad) = nus.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ExperimentError::InvalidTask(format!("nu = {bad} outside [0, 1]")));
    }
    let cells: Vec<(Method, f64, u64)> =
        methods.iter().flat_map(|m| nus.iter().flat_map(move |n| seeds.iter().map(move |s| (*m, *n, *s)))).collect();
    run_cells(&cells, jobs, |(m, n, s)| run_method(task, *m, &TrainConfig { seed: *s, nu: *n, ..config.clone() }))
        .into_iter()
        .collect()
}

/// Median over seeds of each run's median errors.
pub fn median_of_medians<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> Option<ErrorPair> {
    let errs: Vec<ErrorPair> = reports.into_iter().map(|r| r.target_error).collect();
    median_of_error_pairs(&errs).ok()
}

/// Per-side error thresholds of the adaptability probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub source: ErrorPair,
    pub target: ErrorPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptabilityReport {
    pub source_error: ErrorPair,
    pub target_error: ErrorPair,
    pub thresholds: Thresholds,
    pub adaptable: bool,
}

fn below(e: &ErrorPair, t: &ErrorPair) -> bool {
    e.position_error < t.position_error && e.orientation_error < t.orientation_error
}

/// Error of a model trained and tested on `scene` alone.
pub fn single_scene_error(scene: &SceneDataset, task: &AdaptationTask, config: &TrainConfig) -> Result<ErrorPair, ExperimentError> {
    let t = AdaptationTask { name: format!("{}_single", task.name), sources: vec![scene.clone()], target: scene.clone(), ..task.clone() };
    Ok(run_method(&t, Method::NoAdaptation, config)?.target_error)
}

/// Default thresholds: twice the single-scene supervised error per side.
pub fn default_thresholds(task: &AdaptationTask, config: &TrainConfig) -> Result<Thresholds, ExperimentError> {
    let double = |e: ErrorPair| ErrorPair { position_error: 2.0 * e.position_error, orientation_error: 2.0 * e.orientation_error };
    let source = if task.sources.len() == 1 {
        single_scene_error(&task.sources[0], task, config)?
    } else {
        // Several sources: the worst single-scene error among them.
        let errs = task.sources.iter().map(|s| single_scene_error(s, task, config)).collect::<Result<Vec<_>, _>>()?;
        errs.into_iter().fold(ErrorPair::default(), |a, e| ErrorPair {
            position_error: a.position_error.max(e.position_error),
            orientation_error: a.orientation_error.max(e.orientation_error),
        })
    };
    let target = single_scene_error(&task.target, task, config)?;
    Ok(Thresholds { source: double(source), target: double(target) })
}

/// Trains the joint model and declares the task adaptable when both test
/// errors fall below the thresholds.
pub fn adaptability_probe(
    task: &AdaptationTask,
    config: &TrainConfig,
    thresholds: Option<Thresholds>,
) -> Result<AdaptabilityReport, ExperimentError> {
    let thresholds = match thresholds {
        Some(t) => t,
        None => default_thresholds(task, config)?,
    };
    let joint = run_method(task, Method::Joint, config)?;
    Ok(AdaptabilityReport {
        adaptable: below(&joint.source_error, &thresholds.source) && below(&joint.target_error, &thresholds.target),
        source_error: joint.source_error,
        target_error: joint.target_error,
        thresholds,
    })
}

/// Held-out accuracy of a linear logistic probe separating source from
/// target features of a frozen encoder. The probe trains on train-split
/// features and is scored on test-split features, with equal class counts
/// on both sides.
pub fn scene_probe_accuracy(model: &ApanetModel, task: &AdaptationTask, seed: u64) -> Result<f64, ExperimentError> {
    let feats = |obs: &[&Observation]| model.features(&images_to_tensor(obs.iter().map(|o| &o.image)));
    fn balanced<'a>(mut src: Vec<&'a Observation>, mut tgt: Vec<&'a Observation>) -> (Vec<&'a Observation>, Vec<&'a Observation>) {
        let n = src.len().min(tgt.len());
        src.truncate(n);
        tgt.truncate(n);
        (src, tgt)
    }
    let src_train: Vec<&Observation> = task.sources.iter().flat_map(|s| s.train.iter()).collect();
    let src_test: Vec<&Observation> = task.sources.iter().flat_map(|s| s.test.iter()).collect();
    let (a, b) = balanced(src_train, task.target.train.iter().collect());
    let (c, d) = balanced(src_test, task.target.test.iter().collect());
    let (fa, fb, fc, fd) = (feats(&a)?, feats(&b)?, feats(&c)?, feats(&d)?);
    Ok(logistic_probe(&fa, &fb, &fc, &fd, seed)?)
}

/// Trains a logistic regression on `(train0, train1)` and returns its
/// accuracy on `(test0, test1)`. Features are standardized with the
/// training statistics.
pub fn logistic_probe(train0: &Tensor, train1: &Tensor, test0: &Tensor, test1: &Tensor, seed: u64) -> Result<f64, ApanetError> {
    let d = train0.cols();
    let n = train0.rows() + train1.rows();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for t in [train0, train1] {
        for i in 0..t.rows() {
            for (j, v) in t.row(i).iter().enumerate() {
                mean[j] += v / n as f64;
            }
        }
    }
    for t in [train0, train1] {
        for i in 0..t.rows() {
            for (j, v) in t.row(i).iter().enumerate() {
                sd[j] += (v - mean[j]).powi(2) / n as f64;
            }
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let standardize = |a: &Tensor, b: &Tensor| {
        let mut data = Vec::with_capacity((a.rows() + b.rows()) * d);
        for t in [a, b] {
            for i in 0..t.rows() {
                data.extend(t.row(i).iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]));
            }
        }
        let labels: Vec<usize> = std::iter::repeat_n(0, a.rows()).chain(std::iter::repeat_n(1, b.rows())).collect();
        (Tensor { shape: Shape::new(a.rows() + b.rows(), d), data }, labels)
    };
    let (xtr, ytr) = standardize(train0, train1);
    let (xte, yte) = standardize(test0, test1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(31);
    let mut w = Tensor { shape: Shape::new(d, 2), data: (0..2 * d).map(|_| rng.gen_range(-0.01..0.01)).collect() };
    let mut b = Tensor::zeros(1, 2);
    let mut opt = AdamState::new(&[&w, &b]);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let (wv, bv) = (tape.param(&w), tape.param(&b));
        let x = tape.constant(xtr.clone());
        let z = tape.matmul(x, wv)?;
        let z = tape.add_bias(z, bv)?;
        let ce = tape.softmax_cross_entropy(z, &ytr)?;
        let ce = tape.mean(ce)?;
        tape.backward(ce)?;
        let gw = tape.grad(wv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; 2 * d]);
        let gb = tape.grad(bv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; 2]);
        opt.step(&mut [&mut w, &mut b], &[&gw, &gb], 0.05)?;
    }
    let hits = (0..xte.rows())
        .filter(|&i| {
            let r = xte.row(i);
            let s0: f64 = b.data[0] + r.iter().enumerate().map(|(j, v)| v * w.data[2 * j]).sum::<f64>();
            let s1: f64 = b.data[1] + r.iter().enumerate().map(|(j, v)| v * w.data[2 * j + 1]).sum::<f64>();
            (s1 > s0) as usize == yte[i]
        })
        .count();
    Ok(hits as f64 / xte.rows() as f64)
}

const MEDIANS_HEADER: &str = "task,mode,method,nu,seed,target_position,target_orientation,source_position,source_orientation";

/// CSV of per-run medians, one row per `(task, method, ν, seed)`.
pub fn medians_csv(reports: &[RunReport]) -> String {
    let mut s = String::from(MEDIANS_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.task,
            r.mode,
            r.method,
            r.nu,
            r.seed,
            r.target_error.position_error,
            r.target_error.orientation_error,
            r.source_error.position_error,
            r.source_error.orientation_error
        );
    }
    s
}

fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<(), ExperimentError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let io = |e| ExperimentError::Io { path: path.display().to_string(), source: e };
    writeln!(w, "index p_tx p_ty p_tz p_qw p_qx p_qy p_qz tx ty tz qw qx qy qz").map_err(io)?;
    for p in preds {
        let mut line = p.index.to_string();
        for v in p.predicted.to_array().iter().chain(&p.truth.to_array()) {
            let _ = write!(line, " {v}");
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, ExperimentError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let bad = |line: usize, msg: String| ExperimentError::Archive { path: path.display().to_string(), line, msg };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate().skip(1) {
        let line = line.map_err(io_err(path))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 15 {
            return Err(bad(i + 1, format!("expected 15 fields, found {}", toks.len())));
        }
        let index = toks[0].parse().map_err(|e| bad(i + 1, format!("{e}")))?;
        let v: Vec<f64> = toks[1..].iter().map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| bad(i + 1, e.to_string()))?;
        let pose = |a: &[f64]| Pose { t: [a[0], a[1], a[2]], q: Quaternion::new(a[3], a[4], a[5], a[6]) };
        out.push(PredictionRecord { index, predicted: pose(&v[..7]), truth: pose(&v[7..]) });
    }
    Ok(out)
}

/// Writes `config.txt`, `report.jsonl`, `predictions/` and `medians.csv`
/// into `dir`.
pub fn emit_report(reports: &[RunReport], config: &KeyValues, dir: &Path) -> Result<(), ExperimentError> {
    let pred_dir = dir.join("predictions");
    fs::create_dir_all(&pred_dir).map_err(io_err(&pred_dir))?;
    let cfg_path = dir.join("config.txt");
    fs::write(&cfg_path, config.to_string()).map_err(io_err(&cfg_path))?;
    let mut jsonl = String::new();
    for r in reports {
        jsonl.push_str(&serde_json::to_string(r).expect("report serializes"));
        jsonl.push('\n');
        write_predictions(&pred_dir.join(format!("{}.target.txt", r.run_id())), &r.target_predictions)?;
        write_predictions(&pred_dir.join(format!("{}.source.txt", r.run_id())), &r.source_predictions)?;
    }
    let p = dir.join("report.jsonl");
    fs::write(&p, jsonl).map_err(io_err(&p))?;
    let p = dir.join("medians.csv");
    fs::write(&p, medians_csv(reports)).map_err(io_err(&p))?;
    Ok(())
}

/// Reads an archive written by [`emit_report`].
pub fn load_report(dir: &Path) -> Result<(Vec<RunReport>, KeyValues), ExperimentError> {
    let cfg_path = dir.join("config.txt");
    let config = KeyValues::parse(&fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?)?;
    let p = dir.join("report.jsonl");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut reports = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut r: RunReport = serde_json::from_str(line).map_err(|e| ExperimentError::Archive {
            path: p.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let pred_dir = dir.join("predictions");
        r.target_predictions = read_predictions(&pred_dir.join(format!("{}.target.txt", r.run_id())))?;
        r.source_predictions = read_predictions(&pred_dir.join(format!("{}.source.txt", r.run_id())))?;
        reports.push(r);
    }
    Ok((reports, config))
}

/// Medians recomputed from stored predictions.
pub fn recompute_medians(r: &RunReport) -> (ErrorPair, ErrorPair) {
    (errors_of(&r.target_predictions), errors_of(&r.source_predictions))
}

/// Rows = methods, columns = ν values, cells = `pos/orient` medians of
/// medians over seeds.
pub fn markdown_table(reports: &[RunReport]) -> String {
    let mut cells: BTreeMap<(Method, String), Vec<&RunReport>> = BTreeMap::new();
    let mut nus: Vec<f64> = Vec::new();
    for r in reports {
        if !nus.contains(&r.nu) {
            nus.push(r.nu);
        }
        cells.entry((r.method, r.nu.to_string())).or_default().push(r);
    }
    nus.sort_by(f64::total_cmp);
    let mut methods: Vec<Method> = reports.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut s = String::from("| method |");
    for n in &nus {
        let _ = write!(s, " ν={n} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(nus.len()));
    s.push('\n');
    for m in methods {
        let _ = write!(s, "| {m} |");
        for n in &nus {
            match cells.get(&(m, n.to_string())).and_then(|rs| median_of_medians(rs.iter().copied())) {
                Some(e) => {
                    let _ = write!(s, " {e} |");
                }
                None => s.push_str(" – |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Relative position-error gap `(ss − apanet) / ss` of two seed groups.
pub fn relative_gap(ss: &[&RunReport], other: &[&RunReport]) -> Option<f64> {
    let a = median(&ss.iter().map(|r| r.target_error.position_error).collect::<Vec<_>>())?;
    let b = median(&other.iter().map(|r| r.target_error.position_error).collect::<Vec<_>>())?;
    Some((a - b) / a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apanet::ArchConfig;

    fn small_task(mode: PoseMode) -> AdaptationTask {
        let s = SceneConfig { n_train: 40, n_test: 12, image_size: 8, focal: 6.0, ..SceneConfig::default() };
        let t = SceneConfig { seed: 5, pose_center: [10.0, 0.0, 0.0], ..s.clone() };
        build_task(&TaskConfig { name: "toy".into(), mode, anchor_stride: 5, sources: vec![s], target: t }).unwrap()
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            epochs: 3,
            batch_size: 8,
            arch: ArchConfig { encoder_hidden: vec![16, 8], localizer: 16, head_hidden: 8, disc_hidden: vec![8, 8, 4], disc_dropout: 0.5 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn labeled_subset_sizes_and_nesting() {
        assert_eq!(labeled_subset(500, 0.05, 3).len(), 25);
        assert_eq!(labeled_subset(500, 0.0, 3).len(), 0);
        assert_eq!(labeled_subset(500, 1.0, 3).len(), 500);
        let small = labeled_subset(500, 0.01, 3);
        let big = labeled_subset(500, 0.2, 3);
        assert_eq!(&big[..small.len()], small.as_slice());
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let task = small_task(PoseMode::Ape);
        let a = run_method(&task, Method::Apanets, &small_train()).unwrap();
        let b = run_method(&task, Method::Apanets, &small_train()).unwrap();
        assert_eq!(medians_csv(&[a.clone()]), medians_csv(&[b.clone()]));
        assert_eq!(a.target_predictions, b.target_predictions);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.epochs_run, 3);
        assert!(a.disc_accuracy_curve.iter().all(Option::is_some));
        let ss = run_method(&task, Method::Ss, &small_train()).unwrap();
        assert!(ss.disc_accuracy_curve.iter().all(Option::is_none));
    }

    #[test]
    fn joint_equals_apanet_with_alpha_zero_and_nu_one() {
        let task = small_task(PoseMode::Ape);
        let joint = train_method(&task, Method::Joint, &small_train()).unwrap();
        let cfg = TrainConfig { alpha: 0.0, nu: 1.0, ..small_train() };
        let ap = train_method(&task, Method::Apanet, &cfg).unwrap();
        assert_eq!(joint.model, ap.model);
        assert_eq!(joint.report.loss_curve, ap.report.loss_curve);
    }

    #[test]
    fn rpe_predictions_are_composed_with_anchors() {
        let task = small_task(PoseMode::Rpe);
        let r = run_method(&task, Method::Joint, &small_train()).unwrap();
        assert_eq!(r.target_predictions.len(), 12);
        assert!(r.target_error.position_error.is_finite());
        // Ground truth stays absolute.
        assert_eq!(r.target_predictions[0].truth, task.target.test[0].pose);
    }

    #[test]
    fn ss_without_labels_is_rejected() {
        let task = small_task(PoseMode::Ape);
        let cfg = TrainConfig { nu: 0.0, ..small_train() };
        assert!(run_method(&task, Method::Ss, &cfg).is_err());
        assert!(nu_sweep(&task, &[1.5], &[Method::Ss], &cfg, &[0], 1).is_err());
    }

    #[test]
    fn sweep_bookkeeping_and_archive_roundtrip() {
        let task = small_task(PoseMode::Ape);
        let cfg = TrainConfig { epochs: 1, ..small_train() };
        let methods = [Method::Ss, Method::Apanet, Method::Apanets];
        let reports = nu_sweep(&task, &[0.1, 0.5], &methods, &cfg, &[0, 1], 1).unwrap();
        assert_eq!(reports.len(), 3 * 2 * 2);
        let csv = medians_csv(&reports);
        assert_eq!(csv.lines().count(), 1 + 12);

        let dir = tempfile::tempdir().unwrap();
        let mut kv = KeyValues::default();
        cfg.to_key_values(&mut kv);
        emit_report(&reports, &kv, dir.path()).unwrap();
        let (back, kv2) = load_report(dir.path()).unwrap();
        assert_eq!(back, reports);
        assert_eq!(kv2, kv);
        for r in &back {
            let (t, s) = recompute_medians(r);
            assert_eq!(t, r.target_error);
            assert_eq!(s, r.source_error);
        }
        let table = markdown_table(&reports);
        assert!(table.contains("| apanets |"), "{table}");
    }

    #[test]
    fn plateau_detection() {
        let flat = vec![1.0; 20];
        assert!(plateaued(&flat, 10, 1e-4));
        let falling: Vec<f64> = (0..20).map(|i| 10.0 - i as f64).collect();
        assert!(!plateaued(&falling, 10, 1e-4));
        assert!(!plateaued(&flat[..10], 10, 1e-4));
    }

    #[test]
    fn logistic_probe_separates_and_fails_to_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cloud = |shift: f64, n: usize| Tensor {
            shape: Shape::new(n, 3),
            data: (0..3 * n).map(|i| rng.gen_range(-1.0..1.0) + if i % 3 == 0 { shift } else { 0.0 }).collect(),
        };
        let (a, b, c, d) = (cloud(-2.0, 60), cloud(2.0, 60), cloud(-2.0, 40), cloud(2.0, 40));
        assert_eq!(logistic_probe(&a, &b, &c, &d, 0).unwrap(), 1.0);
        let (a, b, c, d) = (cloud(0.0, 60), cloud(0.0, 60), cloud(0.0, 200), cloud(0.0, 200));
        let acc = logistic_probe(&a, &b, &c, &d, 0).unwrap();
        assert!(acc < 0.65, "{acc}");
    }

    #[test]
    fn permuted_orientations_keep_positions() {
        let task = small_task(PoseMode::Ape);
        let p = permute_orientations(&task.target, 3);
        assert!(p.train.iter().zip(&task.target.train).all(|(a, b)| a.pose.t == b.pose.t && a.image == b.image));
        assert!(p.train.iter().zip(&task.target.train).any(|(a, b)| a.pose.q != b.pose.q));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut kv = ExperimentConfig::standard().to_key_values();
        ExperimentConfig::check_keys(&kv).unwrap();
        kv.apply_override("source.3.splat_sigma=1").unwrap();
        kv.apply_override("scene.focal=10").unwrap();
        ExperimentConfig::check_keys(&kv).unwrap();
        kv.apply_override("trian.lr=1").unwrap();
        assert_eq!(ExperimentConfig::check_keys(&kv), Err(ConfigError::UnknownKey("trian.lr".into())));
    }

    #[test]
    fn experiment_config_roundtrip() {
        let cfg = ExperimentConfig::standard();
        let back = ExperimentConfig::from_key_values(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
