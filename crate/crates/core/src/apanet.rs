//! Adversarial pose adaptation network.
//!
//! The model is an MLP encoder `E` producing features `f`, a fully connected
//! localizer followed by separate position and orientation heads (together
//! the pose regressor `G_p`), and a scene discriminator `G_d` on `f`. The
//! pose loss learns its own position/orientation balance through `s_t` and
//! `s_q`.
//!
//! Training alternates between a discriminator step and an encoder/regressor
//! step that maximizes the discriminator's cross-entropy. A gradient-reversal
//! variant does both in one step.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    analytic_gradient, compare_gradients, gradient_check, numeric_gradient, AdamState, GradCheckReport, Shape, Tape, TapeError,
    Tensor, Var,
};
use crate::config::{ConfigError, KeyValues};
use crate::geometry::{EulerAngles, GeometryError, ImageRotation, Pose, Quaternion};
use crate::synth::{rotate_raster, Raster};

pub const CHECKPOINT_MAGIC: &str = "APANET1";
const CHECKPOINT_PREFIX: &str = "APANET";

#[derive(Debug, Error)]
pub enum ApanetError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("non-finite loss at step {step}: {source}")]
    NonFinite { step: u64, source: TapeError },
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("degenerate orientation prediction")]
    DegenerateOrientation,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bad checkpoint: expected magic `{CHECKPOINT_MAGIC}`, found `{0}`")]
    BadMagic(String),
    #[error("unsupported version `{0}` (this build reads `{CHECKPOINT_MAGIC}`)")]
    UnsupportedVersion(String),
    #[error("truncated or malformed checkpoint: {0}")]
    Truncated(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<GeometryError> for ApanetError {
    fn from(_: GeometryError) -> Self {
        ApanetError::DegenerateOrientation
    }
}

/// Training recipe. Every method shares one training loop; they differ only
/// in the effective `alpha`, `nu` and whether rotation augmentation is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    NoAdaptation,
    Joint,
    Ss,
    Apanet,
    Apanets,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::NoAdaptation, Method::Joint, Method::Ss, Method::Apanet, Method::Apanets];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoAdaptation => "no_adaptation",
            Method::Joint => "joint",
            Method::Ss => "ss",
            Method::Apanet => "apanet",
            Method::Apanets => "apanets",
        }
    }

    /// Resolves the effective settings of this method under `config`.
    pub fn settings(self, config: &TrainConfig) -> Result<Settings, ApanetError> {
        let s = |alpha: f64, nu: f64, self_supervised: bool| Settings { alpha, nu, self_supervised };
        match self {
            Method::NoAdaptation => Ok(s(0.0, 0.0, false)),
            Method::Joint => Ok(s(0.0, 1.0, false)),
            Method::Ss if config.nu > 0.0 => Ok(s(0.0, config.nu, false)),
            Method::Ss => Err(ApanetError::InvalidConfig("ss needs nu > 0 (use no_adaptation for nu = 0)".into())),
            Method::Apanet => Ok(s(config.alpha, config.nu, false)),
            Method::Apanets => Ok(s(config.alpha, config.nu, true)),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected one of no_adaptation, joint, ss, apanet, apanets)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub alpha: f64,
    pub nu: f64,
    pub self_supervised: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimization {
    Alternating,
    Grl,
}

impl FromStr for Optimization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alternating" => Ok(Self::Alternating),
            "grl" => Ok(Self::Grl),
            _ => Err(format!("unknown optimization `{s}`")),
        }
    }
}

impl fmt::Display for Optimization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Alternating => "alternating",
            Self::Grl => "grl",
        })
    }
}

/// Layer widths. The defaults are the full-size network; desk-scale tasks
/// shrink them through the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Encoder hidden sizes; the last entry is the feature width.
    pub encoder_hidden: Vec<usize>,
    pub localizer: usize,
    pub head_hidden: usize,
    pub disc_hidden: Vec<usize>,
    pub disc_dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![256, 128],
            localizer: 1024,
            head_hidden: 256,
            disc_hidden: vec![1024, 256, 64],
            disc_dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub nu: f64,
    pub epochs: usize,
    pub seed: u64,
    pub method: Method,
    pub optimization: Optimization,
    pub grl_lambda: f64,
    pub rotation_class_head: bool,
    /// Probability that a labeled sample is rotated in self-supervised mode.
    pub rotation_prob: f64,
    pub init_s_t: f64,
    pub init_s_q: f64,
    /// Stop when the epoch-mean total loss improves by less than 1e-4
    /// (relative) over 10 epochs.
    pub early_stop: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 16,
            alpha: 1.0,
            nu: 0.05,
            epochs: 200,
            seed: 0,
            method: Method::Apanet,
            optimization: Optimization::Alternating,
            grl_lambda: 1.0,
            rotation_class_head: false,
            rotation_prob: 0.5,
            init_s_t: 0.0,
            init_s_q: -1.0,
            early_stop: false,
            arch: ArchConfig::default(),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ApanetError> {
        let bad = |m: String| Err(ApanetError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.nu) {
            return bad(format!("nu = {} outside [0, 1]", self.nu));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return bad(format!("alpha = {} must be finite and nonnegative", self.alpha));
        }
        if !(self.grl_lambda >= 0.0) {
            return bad(format!("grl_lambda = {} must be nonnegative", self.grl_lambda));
        }
        if !(0.0..=1.0).contains(&self.rotation_prob) {
            return bad(format!("rotation_prob = {} outside [0, 1]", self.rotation_prob));
        }
        if !(0.0..1.0).contains(&self.arch.disc_dropout) {
            return bad(format!("disc_dropout = {} outside [0, 1)", self.arch.disc_dropout));
        }
        let a = &self.arch;
        if a.encoder_hidden.is_empty() || a.encoder_hidden.contains(&0) || a.localizer == 0 || a.head_hidden == 0 || a.disc_hidden.contains(&0) {
            return bad("layer widths must be positive and the encoder needs at least one layer".into());
        }
        self.method.settings(self).map(|_| ())
    }

    pub fn to_key_values(&self, kv: &mut KeyValues) {
        let s = "train";
        kv.set(s, "lr", self.lr.to_string());
        kv.set(s, "batch_size", self.batch_size.to_string());
        kv.set(s, "alpha", self.alpha.to_string());
        kv.set(s, "nu", self.nu.to_string());
        kv.set(s, "epochs", self.epochs.to_string());
        kv.set(s, "seed", self.seed.to_string());
        kv.set(s, "method", self.method.to_string());
        kv.set(s, "optimization", self.optimization.to_string());
        kv.set(s, "grl_lambda", self.grl_lambda.to_string());
        kv.set(s, "rotation_class_head", self.rotation_class_head.to_string());
        kv.set(s, "rotation_prob", self.rotation_prob.to_string());
        kv.set(s, "init_s_t", self.init_s_t.to_string());
        kv.set(s, "init_s_q", self.init_s_q.to_string());
        kv.set(s, "early_stop", self.early_stop.to_string());
        let m = "model";
        kv.set(m, "encoder_hidden", join(&self.arch.encoder_hidden));
        kv.set(m, "localizer", self.arch.localizer.to_string());
        kv.set(m, "head_hidden", self.arch.head_hidden.to_string());
        kv.set(m, "disc_hidden", join(&self.arch.disc_hidden));
        kv.set(m, "disc_dropout", self.arch.disc_dropout.to_string());
    }

    pub fn from_key_values(kv: &KeyValues, base: TrainConfig) -> Result<Self, ConfigError> {
        let mut c = base;
        let s = "train";
        kv.read_into(s, "lr", &mut c.lr)?;
        kv.read_into(s, "batch_size", &mut c.batch_size)?;
        kv.read_into(s, "alpha", &mut c.alpha)?;
        kv.read_into(s, "nu", &mut c.nu)?;
        kv.read_into(s, "epochs", &mut c.epochs)?;
        kv.read_into(s, "seed", &mut c.seed)?;
        kv.read_into(s, "method", &mut c.method)?;
        kv.read_into(s, "optimization", &mut c.optimization)?;
        kv.read_into(s, "grl_lambda", &mut c.grl_lambda)?;
        kv.read_into(s, "rotation_class_head", &mut c.rotation_class_head)?;
        kv.read_into(s, "rotation_prob", &mut c.rotation_prob)?;
        kv.read_into(s, "init_s_t", &mut c.init_s_t)?;
        kv.read_into(s, "init_s_q", &mut c.init_s_q)?;
        kv.read_into(s, "early_stop", &mut c.early_stop)?;
        let m = "model";
        if let Some(v) = kv.read_list(m, "encoder_hidden")? {
            c.arch.encoder_hidden = v;
        }
        kv.read_into(m, "localizer", &mut c.arch.localizer)?;
        kv.read_into(m, "head_hidden", &mut c.arch.head_hidden)?;
        if let Some(v) = kv.read_list(m, "disc_hidden")? {
            c.arch.disc_hidden = v;
        }
        kv.read_into(m, "disc_dropout", &mut c.arch.disc_dropout)?;
        Ok(c)
    }
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    /// He-uniform weights, zero bias.
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let data = (0..input * output).map(|_| rng.gen_range(-bound..bound)).collect();
        Dense { w: Tensor { shape: Shape::new(input, output), data }, b: Tensor::zeros(1, output) }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundDense {
    w: Var,
    b: Var,
}

impl BoundDense {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, TapeError> {
        let y = tape.matmul(x, self.w)?;
        tape.add_bias(y, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApanetModel {
    pub arch: ArchConfig,
    pub input_dim: usize,
    pub encoder: Vec<Dense>,
    pub localizer: Dense,
    pub t_hidden: Dense,
    pub t_out: Dense,
    pub q_hidden: Dense,
    pub q_out: Dense,
    pub rotation_head: Option<Dense>,
    pub discriminator: Vec<Dense>,
    pub s_t: Tensor,
    pub s_q: Tensor,
}

/// Parameter leaves of a model recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    encoder: Vec<BoundDense>,
    localizer: BoundDense,
    t_hidden: BoundDense,
    t_out: BoundDense,
    q_hidden: BoundDense,
    q_out: BoundDense,
    rotation_head: Option<BoundDense>,
    discriminator: Vec<BoundDense>,
    pub s_t: Var,
    pub s_q: Var,
    disc_dropout: f64,
}

impl Bound {
    /// Same order as [`ApanetModel::pose_params`].
    pub fn pose_vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for d in self.encoder.iter().chain([&self.localizer, &self.t_hidden, &self.t_out, &self.q_hidden, &self.q_out]) {
            v.extend([d.w, d.b]);
        }
        if let Some(d) = &self.rotation_head {
            v.extend([d.w, d.b]);
        }
        v.extend([self.s_t, self.s_q]);
        v
    }

    pub fn disc_vars(&self) -> Vec<Var> {
        self.discriminator.iter().flat_map(|d| [d.w, d.b]).collect()
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var, TapeError> {
        let mut h = x;
        for layer in &self.encoder {
            h = layer.apply(tape, h)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// Pose regressor on features: returns `(t̂ [m×3], q̂ [m×4], localizer output)`.
    pub fn regress(&self, tape: &mut Tape, f: Var) -> Result<(Var, Var, Var), TapeError> {
        let loc = self.localizer.apply(tape, f)?;
        let loc = tape.relu(loc)?;
        let th = self.t_hidden.apply(tape, loc)?;
        let th = tape.relu(th)?;
        let t = self.t_out.apply(tape, th)?;
        let qh = self.q_hidden.apply(tape, loc)?;
        let qh = tape.relu(qh)?;
        let q = self.q_out.apply(tape, qh)?;
        Ok((t, q, loc))
    }

    /// Scene logits `[m×2]`; dropout follows the tape's mode.
    pub fn discriminate(&self, tape: &mut Tape, f: Var) -> Result<Var, TapeError> {
        let mut h = f;
        let last = self.discriminator.len() - 1;
        for (i, layer) in self.discriminator.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
                h = tape.dropout(h, self.disc_dropout)?;
            }
        }
        Ok(h)
    }

    pub fn rotation_logits(&self, tape: &mut Tape, loc: Var) -> Result<Option<Var>, TapeError> {
        self.rotation_head.map(|d| d.apply(tape, loc)).transpose()
    }
}

fn fingerprint<'a>(ts: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h = DefaultHasher::new();
    for t in ts {
        h.write_usize(t.data.len());
        for v in &t.data {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

/// Stacks rasters into an `[n × G²]` input matrix.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a Raster>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for r in images {
        cols = r.data.len();
        data.extend_from_slice(&r.data);
        rows += 1;
    }
    Tensor { shape: Shape::new(rows, cols), data }
}

fn poses_to_tensors(poses: &[Pose]) -> (Tensor, Tensor) {
    let t = poses.iter().flat_map(|p| p.t).collect();
    let q = poses.iter().flat_map(|p| p.q.canonical().to_array()).collect();
    (
        Tensor { shape: Shape::new(poses.len(), 3), data: t },
        Tensor { shape: Shape::new(poses.len(), 4), data: q },
    )
}

/// Batch pose loss: `mean‖t−t̂‖₁·e^{−s_t} + s_t + mean‖q−q̂‖₁·e^{−s_q} + s_q`.
///
/// The per-sample form is recovered with a batch of one; the summed form is
/// this value times the batch size.
pub fn pose_loss_on_tape(
    tape: &mut Tape,
    t_hat: Var,
    q_hat: Var,
    truth: &[Pose],
    s_t: Var,
    s_q: Var,
) -> Result<Var, TapeError> {
    let (tt, qt) = poses_to_tensors(truth);
    let tt = tape.constant(tt);
    let qt = tape.constant(qt);
    let term = |tape: &mut Tape, pred: Var, target: Var, s: Var| -> Result<Var, TapeError> {
        let d = tape.l1_distance(pred, target)?;
        let d = tape.mean(d)?;
        let ns = tape.neg(s)?;
        let w = tape.exp(ns)?;
        let weighted = tape.mul_scalar(d, w)?;
        tape.add(weighted, s)
    };
    let lt = term(tape, t_hat, tt, s_t)?;
    let lq = term(tape, q_hat, qt, s_q)?;
    tape.add(lt, lq)
}

/// Single-sample pose loss value for a raw 7-vector prediction `[t̂, q̂]`.
pub fn pose_loss(p_hat: [f64; 7], truth: &Pose, s_t: f64, s_q: f64) -> Result<f64, TapeError> {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::vector(p_hat[..3].to_vec()));
    let q = tape.constant(Tensor::vector(p_hat[3..].to_vec()));
    let st = tape.constant(Tensor::scalar(s_t));
    let sq = tape.constant(Tensor::scalar(s_q));
    let l = pose_loss_on_tape(&mut tape, t, q, &[*truth], st, sq)?;
    Ok(tape.scalar_value(l))
}

/// Labeled images with pose targets and the rotation class applied to each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub targets: Vec<Pose>,
    pub rotations: Vec<ImageRotation>,
}

impl LabeledBatch {
    pub fn new(images: &[&Raster], targets: Vec<Pose>) -> Self {
        let rotations = vec![ImageRotation::R0; targets.len()];
        Self { images: images_to_tensor(images.iter().copied()), targets, rotations }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Rotates every image by its assigned `k` and replaces the target with
/// `target_for(index, k)`; with every `k = 0` the batch is unchanged.
pub fn rotate_batch(
    images: &[&Raster],
    rotations: &[ImageRotation],
    mut target_for: impl FnMut(usize, ImageRotation) -> Pose,
) -> LabeledBatch {
    let rotated: Vec<Raster> = images.iter().zip(rotations).map(|(im, k)| rotate_raster(im, *k)).collect();
    LabeledBatch {
        images: images_to_tensor(&rotated),
        targets: rotations.iter().enumerate().map(|(i, k)| target_for(i, *k)).collect(),
        rotations: rotations.to_vec(),
    }
}

/// Draws per-sample rotations: each sample is left alone with probability
/// `1 - p`, otherwise rotated by 90, 180 or 270 degrees uniformly.
pub fn draw_rotations(rng: &mut impl Rng, n: usize, p: f64) -> Vec<ImageRotation> {
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() < p {
                ImageRotation::from_index(rng.gen_range(1..4))
            } else {
                ImageRotation::R0
            }
        })
        .collect()
}

/// Inputs of one training step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub source: LabeledBatch,
    /// Labeled target samples; `None` when ν = 0.
    pub target_labeled: Option<LabeledBatch>,
    /// Unlabeled target images for the discriminator.
    pub target_unlabeled: Tensor,
    /// Source images for the discriminator when they differ from
    /// `source.images` (rotation augmentation).
    pub disc_source: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub source_pose_loss: f64,
    pub target_pose_loss: f64,
    /// Discriminator cross-entropy; zero when the adversarial term is off.
    pub disc_loss: f64,
    pub rotation_loss: f64,
    pub total_loss: f64,
    /// Discriminator accuracy on the step's batch, `NaN` when it did not run.
    pub disc_accuracy: f64,
    pub s_t: f64,
    pub s_q: f64,
}

fn argmax_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&i| {
            let r = logits.row(i);
            let pred = r.iter().enumerate().fold(0, |best, (j, v)| if *v > r[best] { j } else { best });
            pred == labels[i]
        })
        .count();
    hits as f64 / logits.rows() as f64
}

fn scene_labels(ns: usize, nt: usize) -> Vec<usize> {
    std::iter::repeat_n(0, ns).chain(std::iter::repeat_n(1, nt)).collect()
}

impl ApanetModel {
    pub fn new(arch: &ArchConfig, input_dim: usize, rotation_class_head: bool, init_s_t: f64, init_s_q: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut encoder = Vec::new();
        let mut width = input_dim;
        for &h in &arch.encoder_hidden {
            encoder.push(Dense::init(&mut rng, width, h));
            width = h;
        }
        let feat = width;
        let localizer = Dense::init(&mut rng, feat, arch.localizer);
        let t_hidden = Dense::init(&mut rng, arch.localizer, arch.head_hidden);
        let t_out = Dense::init(&mut rng, arch.head_hidden, 3);
        let q_hidden = Dense::init(&mut rng, arch.localizer, arch.head_hidden);
        let q_out = Dense::init(&mut rng, arch.head_hidden, 4);
        let mut discriminator = Vec::new();
        let mut w = feat;
        for &h in arch.disc_hidden.iter().chain(&[2]) {
            discriminator.push(Dense::init(&mut rng, w, h));
            w = h;
        }
        // Created last so that enabling the head leaves the other weights unchanged.
        let rotation_head = rotation_class_head.then(|| Dense::init(&mut rng, arch.localizer, 4));
        Self {
            arch: arch.clone(),
            input_dim,
            encoder,
            localizer,
            t_hidden,
            t_out,
            q_hidden,
            q_out,
            rotation_head,
            discriminator,
            s_t: Tensor::scalar(init_s_t),
            s_q: Tensor::scalar(init_s_q),
        }
    }

    pub fn from_config(config: &TrainConfig, input_dim: usize) -> Self {
        Self::new(&config.arch, input_dim, config.rotation_class_head, config.init_s_t, config.init_s_q, config.seed)
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.last().map_or(self.input_dim, |d| d.w.cols())
    }

    fn pose_layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .iter()
            .chain([&self.localizer, &self.t_hidden, &self.t_out, &self.q_hidden, &self.q_out])
            .chain(self.rotation_head.as_ref())
    }

    /// Encoder, regressor, optional rotation head, then `s_t`, `s_q`.
    pub fn pose_params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.pose_layers().flat_map(|d| [&d.w, &d.b]).collect();
        v.extend([&self.s_t, &self.s_q]);
        v
    }

    pub fn pose_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .encoder
            .iter_mut()
            .chain([&mut self.localizer, &mut self.t_hidden, &mut self.t_out, &mut self.q_hidden, &mut self.q_out])
            .chain(self.rotation_head.as_mut())
            .flat_map(|d| [&mut d.w, &mut d.b])
            .collect();
        v.extend([&mut self.s_t, &mut self.s_q]);
        v
    }

    pub fn disc_params(&self) -> Vec<&Tensor> {
        self.discriminator.iter().flat_map(|d| [&d.w, &d.b]).collect()
    }

    pub fn disc_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.discriminator.iter_mut().flat_map(|d| [&mut d.w, &mut d.b]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.pose_params().iter().chain(self.disc_params().iter()).map(|t| t.data.len()).sum()
    }

    /// Hash of the encoder, regressor and loss weights.
    pub fn pose_fingerprint(&self) -> u64 {
        fingerprint(self.pose_params())
    }

    pub fn disc_fingerprint(&self) -> u64 {
        fingerprint(self.disc_params())
    }

    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, pose_trainable: bool, disc_trainable: bool) -> Bound {
        let mut leaf = |t: &Tensor, trainable: bool| if trainable { tape.param(t) } else { tape.constant(t.clone()) };
        let mut dense = |d: &Dense, trainable: bool| BoundDense { w: leaf(&d.w, trainable), b: leaf(&d.b, trainable) };
        let encoder = self.encoder.iter().map(|d| dense(d, pose_trainable)).collect();
        let localizer = dense(&self.localizer, pose_trainable);
        let t_hidden = dense(&self.t_hidden, pose_trainable);
        let t_out = dense(&self.t_out, pose_trainable);
        let q_hidden = dense(&self.q_hidden, pose_trainable);
        let q_out = dense(&self.q_out, pose_trainable);
        let rotation_head = self.rotation_head.as_ref().map(|d| dense(d, pose_trainable));
        let discriminator = self.discriminator.iter().map(|d| dense(d, disc_trainable)).collect();
        let s_t = if pose_trainable { tape.param(&self.s_t) } else { tape.constant(self.s_t.clone()) };
        let s_q = if pose_trainable { tape.param(&self.s_q) } else { tape.constant(self.s_q.clone()) };
        Bound {
            encoder,
            localizer,
            t_hidden,
            t_out,
            q_hidden,
            q_out,
            rotation_head,
            discriminator,
            s_t,
            s_q,
            disc_dropout: self.arch.disc_dropout,
        }
    }

    /// Encoder features `f = E(x)` in eval mode.
    pub fn features(&self, images: &Tensor) -> Result<Tensor, ApanetError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false);
        let x = tape.constant(images.clone());
        let f = b.encode(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }

    /// Raw regressor outputs `[n × 7]` (unnormalized orientation).
    pub fn raw_predictions(&self, images: &Tensor) -> Result<Vec<[f64; 7]>, ApanetError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false);
        let x = tape.constant(images.clone());
        let f = b.encode(&mut tape, x)?;
        let (t, q, _) = b.regress(&mut tape, f)?;
        let (tv, qv) = (tape.value(t), tape.value(q));
        Ok((0..images.rows())
            .map(|i| {
                let (a, c) = (tv.row(i), qv.row(i));
                [a[0], a[1], a[2], c[0], c[1], c[2], c[3]]
            })
            .collect())
    }

    pub fn predict_batch(&self, images: &Tensor) -> Result<Vec<Pose>, ApanetError> {
        self.raw_predictions(images)?
            .into_iter()
            .map(|p| {
                let q = Quaternion::new(p[3], p[4], p[5], p[6]).normalize().map_err(|_| ApanetError::DegenerateOrientation)?;
                Ok(Pose { t: [p[0], p[1], p[2]], q })
            })
            .collect()
    }

    /// Pose estimate for one image; the discriminator is not involved.
    pub fn predict(&self, image: &Raster) -> Result<Pose, ApanetError> {
        Ok(self.predict_batch(&images_to_tensor([image]))?[0])
    }

    fn labeled_loss(&self, batch: &LabeledBatch, with_rotation_head: bool) -> Result<f64, ApanetError> {
        if batch.is_empty() {
            return Err(ApanetError::EmptyBatch("labeled batch"));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false);
        let x = tape.constant(batch.images.clone());
        let f = b.encode(&mut tape, x)?;
        let (t, q, loc) = b.regress(&mut tape, f)?;
        let mut l = pose_loss_on_tape(&mut tape, t, q, &batch.targets, b.s_t, b.s_q)?;
        if with_rotation_head {
            if let Some(r) = b.rotation_logits(&mut tape, loc)? {
                let labels: Vec<usize> = batch.rotations.iter().map(|k| k.index()).collect();
                let ce = tape.softmax_cross_entropy(r, &labels)?;
                let ce = tape.mean(ce)?;
                l = tape.add(l, ce)?;
            }
        }
        Ok(tape.scalar_value(l))
    }

    /// Mean pose loss over labeled source observations.
    pub fn source_pose_loss(&self, batch: &LabeledBatch) -> Result<f64, ApanetError> {
        self.labeled_loss(batch, false)
    }

    /// Mean pose loss over the labeled target subset; exactly zero without labels.
    pub fn target_pose_loss(&self, batch: Option<&LabeledBatch>) -> Result<f64, ApanetError> {
        match batch {
            None => Ok(0.0),
            Some(b) if b.is_empty() => Ok(0.0),
            Some(b) => self.labeled_loss(b, false),
        }
    }

    /// Pose loss of a rotation-augmented batch, plus the rotation-class
    /// cross-entropy when the model has that head.
    pub fn self_supervised_loss(&self, batch: &LabeledBatch) -> Result<f64, ApanetError> {
        self.labeled_loss(batch, true)
    }

    /// Cross-entropy of the rotation head alone; `None` without the head.
    pub fn rotation_class_loss(&self, batch: &LabeledBatch) -> Result<Option<f64>, ApanetError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false);
        let x = tape.constant(batch.images.clone());
        let f = b.encode(&mut tape, x)?;
        let (_, _, loc) = b.regress(&mut tape, f)?;
        let Some(r) = b.rotation_logits(&mut tape, loc)? else { return Ok(None) };
        let labels: Vec<usize> = batch.rotations.iter().map(|k| k.index()).collect();
        let ce = tape.softmax_cross_entropy(r, &labels)?;
        let ce = tape.mean(ce)?;
        Ok(Some(tape.scalar_value(ce)))
    }

    /// `(discriminator cross-entropy, confusion signal)` in eval mode. The
    /// discriminator minimizes the first; the encoder minimizes the second,
    /// which is its negation.
    pub fn adversarial_loss(&self, source: &Tensor, target: &Tensor) -> Result<(f64, f64), ApanetError> {
        if source.rows() == 0 || target.rows() == 0 {
            return Err(ApanetError::EmptyBatch("adversarial batch"));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false);
        let xs = tape.constant(source.clone());
        let xt = tape.constant(target.clone());
        let x = tape.concat_rows(&[xs, xt])?;
        let f = b.encode(&mut tape, x)?;
        let logits = b.discriminate(&mut tape, f)?;
        let ce = tape.softmax_cross_entropy(logits, &scene_labels(source.rows(), target.rows()))?;
        let ce = tape.mean(ce)?;
        let v = tape.scalar_value(ce);
        Ok((v, -v))
    }

    /// `L_pose^s + L_pose^t − α·CE` at the current parameters.
    pub fn total_loss(&self, batch: &StepBatch, alpha: f64) -> Result<f64, ApanetError> {
        let ls = self.source_pose_loss(&batch.source)?;
        let lt = self.target_pose_loss(batch.target_labeled.as_ref())?;
        let ds = batch.disc_source.as_ref().unwrap_or(&batch.source.images);
        let (ce, _) = self.adversarial_loss(ds, &batch.target_unlabeled)?;
        Ok(ls + lt - alpha * ce)
    }
}

const INIT_STREAM: u64 = 10;
const DROPOUT_STREAM: u64 = 12;

/// Dropout generator for `(seed, step, phase)`. Each step owns a disjoint
/// window of the stream.
fn dropout_rng(seed: u64, step: u64, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DROPOUT_STREAM);
    rng.set_word_pos(((step as u128) * 2 + phase as u128) << 32);
    rng
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ApanetModel,
    pub config: TrainConfig,
    pub settings: Settings,
    pub pose_opt: AdamState,
    pub disc_opt: AdamState,
    pub step: u64,
}

/// Which parameter groups a step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phases {
    Both,
    DiscriminatorOnly,
    PoseOnly,
}

impl Trainer {
    pub fn new(config: &TrainConfig, input_dim: usize) -> Result<Self, ApanetError> {
        config.validate()?;
        let settings = config.method.settings(config)?;
        let model = ApanetModel::from_config(config, input_dim);
        Ok(Self::with_model(model, config.clone(), settings))
    }

    pub fn with_model(model: ApanetModel, config: TrainConfig, settings: Settings) -> Self {
        let pose_opt = AdamState::new(&model.pose_params());
        let disc_opt = AdamState::new(&model.disc_params());
        Self { model, config, settings, pose_opt, disc_opt, step: 0 }
    }

    pub fn adversarial(&self) -> bool {
        self.settings.alpha > 0.0
    }

    pub fn train_step(&mut self, batch: &StepBatch) -> Result<StepReport, ApanetError> {
        self.train_step_phases(batch, Phases::Both)
    }

    /// One optimization step; `phases` restricts which groups move (used to
    /// check the alternation invariants).
    pub fn train_step_phases(&mut self, batch: &StepBatch, phases: Phases) -> Result<StepReport, ApanetError> {
        if batch.source.is_empty() {
            return Err(ApanetError::EmptyBatch("source batch"));
        }
        let step = self.step;
        let wrap = |e: ApanetError| match e {
            ApanetError::Tape(t @ TapeError::NonFinite { .. }) => ApanetError::NonFinite { step, source: t },
            other => other,
        };
        let report = match self.config.optimization {
            Optimization::Alternating => self.alternating(batch, phases),
            Optimization::Grl => self.grl(batch, phases),
        }
        .map_err(wrap)?;
        self.step += 1;
        Ok(report)
    }

    fn disc_inputs(batch: &StepBatch) -> (&Tensor, &Tensor) {
        (batch.disc_source.as_ref().unwrap_or(&batch.source.images), &batch.target_unlabeled)
    }

    /// Pose and rotation losses of the labeled batches on `tape`. Returns
    /// `(pose_total, source, target, rotation, source features)`.
    fn pose_terms(&self, tape: &mut Tape, b: &Bound, batch: &StepBatch) -> Result<(Var, f64, f64, f64, Var), ApanetError> {
        let mut rot = 0.0;
        let mut labeled = |tape: &mut Tape, lb: &LabeledBatch| -> Result<(Var, Var, f64), ApanetError> {
            let x = tape.constant(lb.images.clone());
            let f = b.encode(tape, x)?;
            let (t, q, loc) = b.regress(tape, f)?;
            let mut l = pose_loss_on_tape(tape, t, q, &lb.targets, b.s_t, b.s_q)?;
            let pose_only = tape.scalar_value(l);
            if self.settings.self_supervised {
                if let Some(r) = b.rotation_logits(tape, loc)? {
                    let labels: Vec<usize> = lb.rotations.iter().map(|k| k.index()).collect();
                    let ce = tape.softmax_cross_entropy(r, &labels)?;
                    let ce = tape.mean(ce)?;
                    rot += tape.scalar_value(ce);
                    l = tape.add(l, ce)?;
                }
            }
            Ok((l, f, pose_only))
        };
        let (ls, fs, ls_v) = labeled(tape, &batch.source)?;
        let mut total = ls;
        let mut lt_v = 0.0;
        if let Some(tb) = batch.target_labeled.as_ref().filter(|t| !t.is_empty()) {
            let (lt, _, v) = labeled(tape, tb)?;
            lt_v = v;
            total = tape.add(total, lt)?;
        }
        Ok((total, ls_v, lt_v, rot, fs))
    }

    fn disc_logits(&self, tape: &mut Tape, b: &Bound, batch: &StepBatch, fs: Option<Var>, reverse: Option<f64>) -> Result<(Var, Vec<usize>), ApanetError> {
        let (ds, dt) = Self::disc_inputs(batch);
        let fs = match (fs, batch.disc_source.is_some()) {
            (Some(f), false) => f,
            _ => {
                let x = tape.constant(ds.clone());
                b.encode(tape, x)?
            }
        };
        let xt = tape.constant(dt.clone());
        let ft = b.encode(tape, xt)?;
        let mut f = tape.concat_rows(&[fs, ft])?;
        if let Some(lambda) = reverse {
            f = tape.gradient_reversal(f, lambda)?;
        }
        let logits = b.discriminate(tape, f)?;
        Ok((logits, scene_labels(ds.rows(), dt.rows())))
    }

    fn alternating(&mut self, batch: &StepBatch, phases: Phases) -> Result<StepReport, ApanetError> {
        let seed = self.config.seed;
        let alpha = self.settings.alpha;
        let mut report = StepReport { step: self.step, disc_accuracy: f64::NAN, ..Default::default() };

        // Phase 1: the discriminator learns to tell the scenes apart.
        if self.adversarial() && phases != Phases::PoseOnly {
            let mut tape = Tape::training(dropout_rng(seed, self.step, 0));
            let b = self.model.bind(&mut tape, false, true);
            let (logits, labels) = self.disc_logits(&mut tape, &b, batch, None, None)?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let ce = tape.mean(ce)?;
            tape.backward(ce)?;
            report.disc_accuracy = argmax_accuracy(tape.value(logits), &labels);
            let grads: Vec<Vec<f64>> = b.disc_vars().iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
            let grefs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            self.disc_opt.step(&mut self.model.disc_params_mut(), &grefs, self.config.lr)?;
        }

        // Phase 2: encoder and regressor, against the frozen discriminator.
        if phases != Phases::DiscriminatorOnly {
            let mut tape = Tape::training(dropout_rng(seed, self.step, 1));
            let b = self.model.bind(&mut tape, true, false);
            let (pose, ls, lt, rot, fs) = self.pose_terms(&mut tape, &b, batch)?;
            let mut total = pose;
            if self.adversarial() {
                let (logits, labels) = self.disc_logits(&mut tape, &b, batch, Some(fs), None)?;
                let ce = tape.softmax_cross_entropy(logits, &labels)?;
                let ce = tape.mean(ce)?;
                report.disc_loss = tape.scalar_value(ce);
                let adv = tape.scale(ce, -alpha)?;
                total = tape.add(total, adv)?;
            }
            tape.backward(total)?;
            report.total_loss = tape.scalar_value(total);
            report.source_pose_loss = ls;
            report.target_pose_loss = lt;
            report.rotation_loss = rot;
            self.apply_pose_grads(&tape, &b)?;
        }
        report.s_t = self.model.s_t.item();
        report.s_q = self.model.s_q.item();
        Ok(report)
    }

    fn grl(&mut self, batch: &StepBatch, phases: Phases) -> Result<StepReport, ApanetError> {
        let alpha = self.settings.alpha;
        let mut report = StepReport { step: self.step, disc_accuracy: f64::NAN, ..Default::default() };
        let pose_on = phases != Phases::DiscriminatorOnly;
        let disc_on = self.adversarial() && phases != Phases::PoseOnly;
        let mut tape = Tape::training(dropout_rng(self.config.seed, self.step, 0));
        let b = self.model.bind(&mut tape, pose_on, disc_on);
        let (pose, ls, lt, rot, fs) = self.pose_terms(&mut tape, &b, batch)?;
        let mut objective = pose;
        let mut eq5 = tape.scalar_value(pose);
        if self.adversarial() {
            let (logits, labels) = self.disc_logits(&mut tape, &b, batch, Some(fs), Some(self.config.grl_lambda))?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let ce = tape.mean(ce)?;
            report.disc_loss = tape.scalar_value(ce);
            report.disc_accuracy = argmax_accuracy(tape.value(logits), &labels);
            eq5 -= alpha * report.disc_loss;
            let adv = tape.scale(ce, alpha)?;
            objective = tape.add(objective, adv)?;
        }
        tape.backward(objective)?;
        report.total_loss = eq5;
        report.source_pose_loss = ls;
        report.target_pose_loss = lt;
        report.rotation_loss = rot;
        if pose_on {
            self.apply_pose_grads(&tape, &b)?;
        }
        if disc_on {
            let grads: Vec<Vec<f64>> = b.disc_vars().iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
            let grefs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            self.disc_opt.step(&mut self.model.disc_params_mut(), &grefs, self.config.lr)?;
        }
        report.s_t = self.model.s_t.item();
        report.s_q = self.model.s_q.item();
        Ok(report)
    }

    fn apply_pose_grads(&mut self, tape: &Tape, b: &Bound) -> Result<(), ApanetError> {
        let vars = b.pose_vars();
        let sizes: Vec<usize> = self.model.pose_params().iter().map(|t| t.data.len()).collect();
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(&sizes)
            .map(|(v, n)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; *n]))
            .collect();
        let grefs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.pose_opt.step(&mut self.model.pose_params_mut(), &grefs, self.config.lr)?;
        Ok(())
    }
}

/// Everything needed to resume or reproduce a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ApanetModel,
    pub config: TrainConfig,
    /// Training steps taken so far.
    pub step: u64,
    /// Word position of the batch-sampling generator.
    pub rng_word_pos: u128,
}

fn named_tensors(model: &ApanetModel) -> Vec<(String, &Tensor)> {
    let mut layers: Vec<(String, &Dense)> = model.encoder.iter().enumerate().map(|(i, d)| (format!("encoder.{i}"), d)).collect();
    layers.push(("localizer".into(), &model.localizer));
    layers.push(("t_hidden".into(), &model.t_hidden));
    layers.push(("t_out".into(), &model.t_out));
    layers.push(("q_hidden".into(), &model.q_hidden));
    layers.push(("q_out".into(), &model.q_out));
    if let Some(d) = &model.rotation_head {
        layers.push(("rotation_head".into(), d));
    }
    layers.extend(model.discriminator.iter().enumerate().map(|(i, d)| (format!("discriminator.{i}"), d)));
    let mut out: Vec<(String, &Tensor)> = layers.into_iter().flat_map(|(n, d)| [(format!("{n}.w"), &d.w), (format!("{n}.b"), &d.b)]).collect();
    out.push(("s_t".into(), &model.s_t));
    out.push(("s_q".into(), &model.s_q));
    out
}

pub fn save_model(path: &Path, ckpt: &Checkpoint) -> Result<(), ApanetError> {
    let mut kv = KeyValues::default();
    ckpt.config.to_key_values(&mut kv);
    let tensors = named_tensors(&ckpt.model);
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("input_dim {}\n", ckpt.model.input_dim));
    header.push_str(&format!("step {}\n", ckpt.step));
    header.push_str(&format!("rng_word_pos {}\n", ckpt.rng_word_pos));
    let cfg = kv.to_string();
    header.push_str(&format!("config {}\n", cfg.lines().count()));
    header.push_str(&cfg);
    header.push_str(&format!("tensors {}\n", tensors.len()));
    for (name, t) in &tensors {
        header.push_str(&format!("{name} {} {}\n", t.rows(), t.cols()));
    }
    header.push_str("data\n");
    let mut bytes = header.into_bytes();
    for (_, t) in &tensors {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Checkpoint, ApanetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut next_line = || -> Result<String, ApanetError> {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| ApanetError::Truncated("unterminated header line".into()))?;
        let line = String::from_utf8_lossy(&bytes[pos..pos + end]).into_owned();
        pos += end + 1;
        Ok(line)
    };
    let magic = next_line().map_err(|_| ApanetError::BadMagic(String::from_utf8_lossy(&bytes[..bytes.len().min(16)]).into_owned()))?;
    if magic != CHECKPOINT_MAGIC {
        let rest = magic.strip_prefix(CHECKPOINT_PREFIX);
        return Err(match rest {
            Some(v) if !v.is_empty() && v.chars().all(|c| c.is_ascii_digit()) => ApanetError::UnsupportedVersion(magic),
            _ => ApanetError::BadMagic(magic),
        });
    }
    let field = |line: String, key: &str| -> Result<String, ApanetError> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| ApanetError::Truncated(format!("expected `{key}`, found `{line}`")))
    };
    let num = |s: String| -> Result<u128, ApanetError> { s.trim().parse().map_err(|_| ApanetError::Truncated(format!("bad number `{s}`"))) };
    let input_dim = num(field(next_line()?, "input_dim")?)? as usize;
    let step = num(field(next_line()?, "step")?)? as u64;
    let rng_word_pos = num(field(next_line()?, "rng_word_pos")?)?;
    let n_cfg = num(field(next_line()?, "config")?)? as usize;
    let mut cfg_text = String::new();
    for _ in 0..n_cfg {
        cfg_text.push_str(&next_line()?);
        cfg_text.push('\n');
    }
    let config = TrainConfig::from_key_values(&KeyValues::parse(&cfg_text)?, TrainConfig::default())?;
    let n_t = num(field(next_line()?, "tensors")?)? as usize;
    let mut shapes = Vec::with_capacity(n_t);
    for _ in 0..n_t {
        let line = next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(ApanetError::Truncated(format!("bad tensor line `{line}`")));
        }
        let r = num(parts[1].into())? as usize;
        let c = num(parts[2].into())? as usize;
        shapes.push((parts[0].to_string(), r, c));
    }
    if next_line()? != "data" {
        return Err(ApanetError::Truncated("missing data marker".into()));
    }

    let mut model = ApanetModel::from_config(&config, input_dim);
    let expected: Vec<(String, Shape)> = named_tensors(&model).into_iter().map(|(n, t)| (n, t.shape)).collect();
    if expected.len() != shapes.len() || expected.iter().zip(&shapes).any(|((n, s), (m, r, c))| n != m || s.rows != *r || s.cols != *c) {
        return Err(ApanetError::Truncated("tensor manifest does not match the stored config".into()));
    }
    let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
    if bytes.len() - pos != total * 8 {
        return Err(ApanetError::Truncated(format!("expected {} data bytes, found {}", total * 8, bytes.len() - pos)));
    }
    let mut values = bytes[pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let fill = |t: &mut Tensor, values: &mut dyn Iterator<Item = f64>| t.data.iter_mut().for_each(|v| *v = values.next().unwrap_or(f64::NAN));
    for d in model.encoder.iter_mut() {
        fill(&mut d.w, &mut values);
        fill(&mut d.b, &mut values);
    }
    for d in [&mut model.localizer, &mut model.t_hidden, &mut model.t_out, &mut model.q_hidden, &mut model.q_out] {
        fill(&mut d.w, &mut values);
        fill(&mut d.b, &mut values);
    }
    if let Some(d) = model.rotation_head.as_mut() {
        fill(&mut d.w, &mut values);
        fill(&mut d.b, &mut values);
    }
    for d in model.discriminator.iter_mut() {
        fill(&mut d.w, &mut values);
        fill(&mut d.b, &mut values);
    }
    fill(&mut model.s_t, &mut values);
    fill(&mut model.s_q, &mut values);
    Ok(Checkpoint { model, config, step, rng_word_pos })
}

/// Encoder features for source and target plus the pose loss, ready for a
/// discriminator term. `lambda` inserts gradient reversal before the
/// discriminator.
fn composite(tape: &mut Tape, b: &Bound, sb: &StepBatch, lambda: Option<f64>) -> Result<(Var, Var), TapeError> {
    let x = tape.constant(sb.source.images.clone());
    let f = b.encode(tape, x)?;
    let (t, q, _) = b.regress(tape, f)?;
    let lp = pose_loss_on_tape(tape, t, q, &sb.source.targets, b.s_t, b.s_q)?;
    let xt = tape.constant(sb.target_unlabeled.clone());
    let ft = b.encode(tape, xt)?;
    let mut fd = tape.concat_rows(&[f, ft])?;
    if let Some(l) = lambda {
        fd = tape.gradient_reversal(fd, l)?;
    }
    let logits = b.discriminate(tape, fd)?;
    let ce = tape.softmax_cross_entropy(logits, &scene_labels(sb.source.len(), sb.target_unlabeled.rows()))?;
    let ce = tape.mean(ce)?;
    Ok((lp, ce))
}

/// Builds a [`Bound`] from already-recorded leaves in parameter order.
fn rebind(model: &ApanetModel, v: &[Var], n_pose: usize) -> Bound {
    let mut it = v[..n_pose].iter().copied();
    let mut d = || BoundDense { w: it.next().expect("pose leaf"), b: it.next().expect("pose leaf") };
    let encoder = model.encoder.iter().map(|_| d()).collect();
    let (localizer, t_hidden, t_out, q_hidden, q_out) = (d(), d(), d(), d(), d());
    let rotation_head = model.rotation_head.as_ref().map(|_| d());
    let s_t = v[n_pose - 2];
    let s_q = v[n_pose - 1];
    let mut dv = v[n_pose..].iter().copied();
    let discriminator = model
        .discriminator
        .iter()
        .map(|_| BoundDense { w: dv.next().expect("disc leaf"), b: dv.next().expect("disc leaf") })
        .collect();
    Bound { encoder, localizer, t_hidden, t_out, q_hidden, q_out, rotation_head, discriminator, s_t, s_q, disc_dropout: model.arch.disc_dropout }
}

/// One loss path of the gradient suite at one random point.
#[derive(Debug, Clone)]
pub struct PathCheck {
    pub path: &'static str,
    pub point: usize,
    pub report: GradCheckReport,
}

/// Loss paths covered by [`gradient_suite`].
pub const GRADIENT_PATHS: [&str; 4] = ["pose_loss", "discriminator_ce", "composite", "gradient_reversal"];

fn random_raster(rng: &mut ChaCha8Rng, g: usize) -> Raster {
    Raster { size: g, data: (0..g * g).map(|_| rng.gen::<f64>()).collect() }
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let e = EulerAngles { yaw: rng.gen_range(-3.0..3.0), pitch: rng.gen_range(-1.5..1.5), roll: rng.gen_range(-3.0..3.0) };
    Pose { t: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)], q: Quaternion::from_euler(e) }
}

fn random_step_batch(rng: &mut ChaCha8Rng, g: usize) -> StepBatch {
    let imgs = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| random_raster(rng, g)).collect::<Vec<_>>();
    let si = imgs(rng, 4);
    let sp = (0..4).map(|_| random_pose(rng)).collect();
    let ui = imgs(rng, 4);
    StepBatch {
        source: LabeledBatch::new(&si.iter().collect::<Vec<_>>(), sp),
        target_labeled: None,
        target_unlabeled: images_to_tensor(&ui),
        disc_source: None,
    }
}

/// Finite-difference check of every training loss on `points` random
/// inputs and parameter draws per path, central differences with step `h`.
///
/// The gradient-reversal path compares the reversed graph against the
/// function each parameter group actually descends: `pose − λ·ce` for the
/// encoder and regressor, `pose + ce` for the discriminator.
pub fn gradient_suite(seed: u64, points: usize, h: f64) -> Result<Vec<PathCheck>, ApanetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig { encoder_hidden: vec![6, 5], localizer: 7, head_hidden: 4, disc_hidden: vec![6, 4, 3], disc_dropout: 0.5 };
    let mut out = Vec::new();
    for point in 0..points {
        // Pose loss with free predictions and weights.
        let truth: Vec<Pose> = (0..3).map(|_| random_pose(&mut rng)).collect();
        let params = vec![
            Tensor::new(3, 3, (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect())?,
            Tensor::new(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())?,
            Tensor::scalar(rng.gen_range(-2.0..2.0)),
            Tensor::scalar(rng.gen_range(-2.0..2.0)),
        ];
        let report = gradient_check(&params, h, |tape, v| pose_loss_on_tape(tape, v[0], v[1], &truth, v[2], v[3]))?;
        out.push(PathCheck { path: GRADIENT_PATHS[0], point, report });

        // Model paths share one random network and batch.
        let model = ApanetModel::new(&arch, 9, false, rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..0.0), rng.gen());
        let sb = random_step_batch(&mut rng, 3);
        let mut params: Vec<Tensor> = model.pose_params().into_iter().cloned().collect();
        let n_pose = params.len();
        params.extend(model.disc_params().into_iter().cloned());

        let disc_only: Vec<Tensor> = params[n_pose..].to_vec();
        let report = gradient_check(&disc_only, h, |tape, v| {
            let mut all: Vec<Var> = model.pose_params().into_iter().map(|t| tape.constant(t.clone())).collect();
            all.extend_from_slice(v);
            Ok(composite(tape, &rebind(&model, &all, n_pose), &sb, None)?.1)
        })?;
        out.push(PathCheck { path: GRADIENT_PATHS[1], point, report });

        let report = gradient_check(&params, h, |tape, v| {
            let (lp, ce) = composite(tape, &rebind(&model, v, n_pose), &sb, None)?;
            let adv = tape.scale(ce, -1.0)?;
            tape.add(lp, adv)
        })?;
        out.push(PathCheck { path: GRADIENT_PATHS[2], point, report });

        let lambda = rng.gen_range(0.1..2.0);
        let analytic = analytic_gradient(&params, |tape, v| {
            let (lp, ce) = composite(tape, &rebind(&model, v, n_pose), &sb, Some(lambda))?;
            tape.add(lp, ce)
        })?;
        let enc = numeric_gradient(&params, h, |tape, v| {
            let (lp, ce) = composite(tape, &rebind(&model, v, n_pose), &sb, None)?;
            let adv = tape.scale(ce, -lambda)?;
            tape.add(lp, adv)
        })?;
        let disc = numeric_gradient(&params, h, |tape, v| {
            let (lp, ce) = composite(tape, &rebind(&model, v, n_pose), &sb, None)?;
            tape.add(lp, ce)
        })?;
        let numeric: Vec<Vec<Option<f64>>> = enc[..n_pose].iter().chain(&disc[n_pose..]).cloned().collect();
        out.push(PathCheck { path: GRADIENT_PATHS[3], point, report: compare_gradients(&analytic, &numeric) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig { encoder_hidden: vec![6, 5], localizer: 7, head_hidden: 4, disc_hidden: vec![6, 4, 3], disc_dropout: 0.5 }
    }

    fn tiny_config(method: Method) -> TrainConfig {
        TrainConfig { arch: tiny_arch(), method, lr: 1e-3, ..TrainConfig::default() }
    }

    fn rng_raster(rng: &mut ChaCha8Rng, g: usize) -> Raster {
        Raster { size: g, data: (0..g * g).map(|_| rng.gen::<f64>()).collect() }
    }

    fn rng_pose(rng: &mut ChaCha8Rng) -> Pose {
        let e = EulerAngles { yaw: rng.gen_range(-3.0..3.0), pitch: rng.gen_range(-1.5..1.5), roll: rng.gen_range(-3.0..3.0) };
        Pose { t: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)], q: Quaternion::from_euler(e) }
    }

    fn batch(rng: &mut ChaCha8Rng, g: usize, n: usize) -> (Vec<Raster>, Vec<Pose>) {
        ((0..n).map(|_| rng_raster(rng, g)).collect(), (0..n).map(|_| rng_pose(rng)).collect())
    }

    fn step_batch(rng: &mut ChaCha8Rng, g: usize, with_target: bool) -> StepBatch {
        let (si, sp) = batch(rng, g, 4);
        let (ti, tp) = batch(rng, g, 3);
        let (ui, _) = batch(rng, g, 4);
        fn refs(v: &[Raster]) -> Vec<&Raster> {
            v.iter().collect()
        }
        StepBatch {
            source: LabeledBatch::new(&refs(&si), sp),
            target_labeled: with_target.then(|| LabeledBatch::new(&refs(&ti), tp)),
            target_unlabeled: images_to_tensor(&ui),
            disc_source: None,
        }
    }

    #[test]
    fn pose_loss_examples() {
        let p = Pose::IDENTITY;
        let exact = pose_loss(p.to_array(), &p, 0.0, -1.0).unwrap();
        assert_eq!(exact, -1.0);
        // ‖Δt‖₁ = 2, ‖Δq‖₁ = 0.1 at s_t = 0, s_q = -1.
        let v = pose_loss([1.0, -0.5, 0.5, 0.95, 0.05, 0.0, 0.0], &p, 0.0, -1.0).unwrap();
        assert!((v - 1.271_828_182_845_904_5).abs() < 1e-12, "{v}");

        let mut tape = Tape::new();
        let t = tape.constant(Tensor::vector(vec![0.0; 3]));
        let q = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]));
        let st = tape.param(&Tensor::scalar(0.0));
        let sq = tape.param(&Tensor::scalar(-1.0));
        let l = pose_loss_on_tape(&mut tape, t, q, &[p], st, sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(st).unwrap(), &[1.0]);
    }

    #[test]
    fn pose_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let truth: Vec<Pose> = (0..3).map(|_| rng_pose(&mut rng)).collect();
            let params = vec![
                Tensor::new(3, 3, (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap(),
                Tensor::new(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
                Tensor::scalar(rng.gen_range(-2.0..2.0)),
                Tensor::scalar(rng.gen_range(-2.0..2.0)),
            ];
            let r = gradient_check(&params, 1e-5, |tape, v| pose_loss_on_tape(tape, v[0], v[1], &truth, v[2], v[3])).unwrap();
            assert!(r.max_relative_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn batch_losses_match_per_sample_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ApanetModel::from_config(&tiny_config(Method::Apanet), 16);
        let (imgs, poses) = batch(&mut rng, 4, 6);
        let refs: Vec<&Raster> = imgs.iter().collect();
        let b = LabeledBatch::new(&refs, poses.clone());
        let got = model.source_pose_loss(&b).unwrap();
        let raw = model.raw_predictions(&b.images).unwrap();
        let (st, sq) = (model.s_t.item(), model.s_q.item());
        let oracle: f64 = raw.iter().zip(&poses).map(|(p, t)| pose_loss(*p, t, st, sq).unwrap()).sum::<f64>() / 6.0;
        assert!((got - oracle).abs() < 1e-12);
        assert_eq!(model.target_pose_loss(Some(&b)).unwrap(), got);
        assert_eq!(model.target_pose_loss(None).unwrap(), 0.0);

        let one = LabeledBatch::new(&refs[..1], poses[..1].to_vec());
        let two = LabeledBatch::new(&[refs[0], refs[0]], vec![poses[0], poses[0]]);
        let l1 = model.source_pose_loss(&one).unwrap();
        let l2 = model.source_pose_loss(&two).unwrap();
        assert!((2.0 * l2 - 2.0 * l1).abs() < 1e-12);
        assert!(model.source_pose_loss(&LabeledBatch::new(&[], vec![])).is_err());
    }

    #[test]
    fn uniform_discriminator_gives_ln2_and_total_is_affine_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = ApanetModel::from_config(&tiny_config(Method::Apanet), 16);
        let last = model.discriminator.last_mut().unwrap();
        last.w.data.iter_mut().for_each(|v| *v = 0.0);
        let sb = step_batch(&mut rng, 4, true);
        let (ce, conf) = model.adversarial_loss(&sb.source.images, &sb.target_unlabeled).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        assert_eq!(conf, -ce);

        let model = ApanetModel::from_config(&tiny_config(Method::Apanet), 16);
        let t0 = model.total_loss(&sb, 0.0).unwrap();
        let t1 = model.total_loss(&sb, 1.0).unwrap();
        let t2 = model.total_loss(&sb, 2.0).unwrap();
        assert!(((t2 - t0) - 2.0 * (t1 - t0)).abs() < 1e-12);
        let ls = model.source_pose_loss(&sb.source).unwrap();
        let lt = model.target_pose_loss(sb.target_labeled.as_ref()).unwrap();
        assert_eq!(t0, ls + lt);
    }

    #[test]
    fn rotation_head_is_ln4_when_untrained() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = tiny_config(Method::Apanets);
        cfg.rotation_class_head = true;
        let mut model = ApanetModel::from_config(&cfg, 16);
        model.rotation_head.as_mut().unwrap().w.data.iter_mut().for_each(|v| *v = 0.0);
        let (imgs, poses) = batch(&mut rng, 4, 5);
        let refs: Vec<&Raster> = imgs.iter().collect();
        let rots = draw_rotations(&mut rng, 5, 1.0);
        let b = rotate_batch(&refs, &rots, |i, k| poses[i].rotate_image(k));
        let ce = model.rotation_class_loss(&b).unwrap().unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unrotated_self_supervised_batch_equals_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = ApanetModel::from_config(&tiny_config(Method::Apanets), 16);
        let (imgs, poses) = batch(&mut rng, 4, 5);
        let refs: Vec<&Raster> = imgs.iter().collect();
        let zero = vec![ImageRotation::R0; 5];
        let b = rotate_batch(&refs, &zero, |i, k| poses[i].rotate_image(k));
        let plain = LabeledBatch::new(&refs, poses.clone());
        assert!((model.self_supervised_loss(&b).unwrap() - model.source_pose_loss(&plain).unwrap()).abs() < 1e-12);
        let rots = draw_rotations(&mut rng, 5, 1.0);
        let rb = rotate_batch(&refs, &rots, |i, k| poses[i].rotate_image(k));
        for (a, p) in rb.targets.iter().zip(&poses) {
            assert_eq!(a.t, p.t);
        }
    }

    #[test]
    fn model_composites_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny_config(Method::Apanet);
        let model = ApanetModel::from_config(&cfg, 9);
        let sb = step_batch(&mut rng, 3, true);
        let mut params: Vec<Tensor> = model.pose_params().into_iter().cloned().collect();
        let n_pose = params.len();
        params.extend(model.disc_params().into_iter().cloned());

        // Pose loss minus the discriminator cross-entropy.
        let r = gradient_check(&params, 1e-4, |tape, v| {
            let (lp, ce) = composite(tape, &rebind(&model, v, n_pose), &sb, None)?;
            let adv = tape.scale(ce, -1.0)?;
            tape.add(lp, adv)
        })
        .unwrap();
        assert!(r.checked > 300, "{r:?}");
        assert!(r.max_relative_error < 1e-5, "{r:?}");

        // GRL graph: the encoder descends on −λ·CE, the discriminator on +CE.
        let lambda = 0.7;
        let analytic = analytic_gradient(&params, |tape, v| {
            let (lp, ce) = composite(tape, &rebind(&model, v, n_pose), &sb, Some(lambda))?;
            tape.add(lp, ce)
        })
        .unwrap();
        let enc = numeric_gradient(&params, 1e-4, |tape, v| {
            let (lp, ce) = composite(tape, &rebind(&model, v, n_pose), &sb, None)?;
            let adv = tape.scale(ce, -lambda)?;
            tape.add(lp, adv)
        })
        .unwrap();
        let disc = numeric_gradient(&params, 1e-4, |tape, v| {
            let (lp, ce) = composite(tape, &rebind(&model, v, n_pose), &sb, None)?;
            tape.add(lp, ce)
        })
        .unwrap();
        let numeric: Vec<Vec<Option<f64>>> = enc[..n_pose].iter().chain(&disc[n_pose..]).cloned().collect();
        let r = compare_gradients(&analytic, &numeric);
        assert!(r.checked > 300, "{r:?}");
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }

    #[test]
    fn gradient_suite_covers_every_path() {
        let checks = gradient_suite(3, 2, 1e-4).unwrap();
        assert_eq!(checks.len(), 2 * GRADIENT_PATHS.len());
        for c in &checks {
            assert!(c.report.checked > 10, "{c:?}");
            assert!(c.report.max_relative_error < 1e-5, "{c:?}");
        }
    }

    #[test]
    fn phases_touch_only_their_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sb = step_batch(&mut rng, 4, true);
        for opt in [Optimization::Alternating, Optimization::Grl] {
            let mut cfg = tiny_config(Method::Apanet);
            cfg.optimization = opt;
            let mut tr = Trainer::new(&cfg, 16).unwrap();
            let (p0, d0) = (tr.model.pose_fingerprint(), tr.model.disc_fingerprint());
            tr.train_step_phases(&sb, Phases::DiscriminatorOnly).unwrap();
            assert_eq!(tr.model.pose_fingerprint(), p0);
            let d1 = tr.model.disc_fingerprint();
            assert_ne!(d1, d0);
            tr.train_step_phases(&sb, Phases::PoseOnly).unwrap();
            assert_eq!(tr.model.disc_fingerprint(), d1);
            assert_ne!(tr.model.pose_fingerprint(), p0);
        }
    }

    #[test]
    fn alpha_zero_gives_no_encoder_gradient_from_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sb = step_batch(&mut rng, 4, true);
        let mut a = tiny_config(Method::Apanet);
        a.alpha = 0.0;
        a.nu = 0.3;
        let mut ss = tiny_config(Method::Ss);
        ss.nu = 0.3;
        let mut ta = Trainer::new(&a, 16).unwrap();
        let mut ts = Trainer::new(&ss, 16).unwrap();
        for _ in 0..3 {
            let ra = ta.train_step(&sb).unwrap();
            let rs = ts.train_step(&sb).unwrap();
            assert_eq!(format!("{ra:?}"), format!("{rs:?}"));
        }
        assert_eq!(ta.model, ts.model);
        // GRL with lambda = 0 leaves the encoder to the pose loss alone.
        let mut g = tiny_config(Method::Apanet);
        g.optimization = Optimization::Grl;
        g.grl_lambda = 0.0;
        let mut tg = Trainer::new(&g, 16).unwrap();
        let mut tape = Tape::training(dropout_rng(0, 0, 0));
        let b = tg.model.bind(&mut tape, true, true);
        let x = tape.constant(sb.target_unlabeled.clone());
        let f = b.encode(&mut tape, x).unwrap();
        let r = tape.gradient_reversal(f, 0.0).unwrap();
        let logits = b.discriminate(&mut tape, r).unwrap();
        let ce = tape.softmax_cross_entropy(logits, &[1, 1, 1, 1]).unwrap();
        let ce = tape.mean(ce).unwrap();
        tape.backward(ce).unwrap();
        for v in &b.pose_vars()[..2] {
            assert!(tape.grad(*v).map_or(true, |g| g.iter().all(|x| *x == 0.0)));
        }
        tg.train_step(&sb).unwrap();
    }

    #[test]
    fn steps_replay_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sb = step_batch(&mut rng, 4, true);
        let run = || {
            let mut tr = Trainer::new(&tiny_config(Method::Apanet), 16).unwrap();
            let r: Vec<StepReport> = (0..3).map(|_| tr.train_step(&sb).unwrap()).collect();
            (r, tr.model)
        };
        let (ra, ma) = run();
        let (rb, mb) = run();
        assert_eq!(ma, mb);
        assert_eq!(format!("{ra:?}"), format!("{rb:?}"));
    }

    #[test]
    fn discriminator_separates_separable_scenes() {
        // Source images are dark, target images bright. With the encoder
        // frozen the discriminator alone must reach perfect accuracy, as a
        // logistic regression on the same features would.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = 4;
        let dark: Vec<Raster> = (0..8).map(|_| Raster { size: g, data: (0..16).map(|_| rng.gen_range(0.0..0.2)).collect() }).collect();
        let bright: Vec<Raster> = (0..8).map(|_| Raster { size: g, data: (0..16).map(|_| rng.gen_range(0.8..1.0)).collect() }).collect();
        let refs: Vec<&Raster> = dark.iter().collect();
        let sb = StepBatch {
            source: LabeledBatch::new(&refs, vec![Pose::IDENTITY; 8]),
            target_labeled: None,
            target_unlabeled: images_to_tensor(&bright),
            disc_source: None,
        };
        let mut cfg = tiny_config(Method::Apanet);
        cfg.lr = 1e-2;
        cfg.arch.disc_dropout = 0.0;
        let mut tr = Trainer::new(&cfg, 16).unwrap();
        let mut acc = 0.0;
        for _ in 0..200 {
            acc = tr.train_step_phases(&sb, Phases::DiscriminatorOnly).unwrap().disc_accuracy;
        }
        assert_eq!(acc, 1.0);
        let (ce, _) = tr.model.adversarial_loss(&sb.source.images, &sb.target_unlabeled).unwrap();
        assert!(ce < 0.05, "{ce}");
    }

    #[test]
    fn prediction_is_deterministic_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = ApanetModel::from_config(&tiny_config(Method::Apanet), 16);
        let im = rng_raster(&mut rng, 4);
        let a = model.predict(&im).unwrap();
        assert_eq!(a, model.predict(&im).unwrap());
        assert!((a.q.norm() - 1.0).abs() < 1e-12 && a.q.w >= 0.0);
        let mut dead = model.clone();
        dead.q_out.w.data.iter_mut().for_each(|v| *v = 0.0);
        dead.q_out.b.data.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(dead.predict(&im), Err(ApanetError::DegenerateOrientation)));
        assert_eq!(ApanetError::DegenerateOrientation.to_string(), "degenerate orientation prediction");
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.apanet");
        let mut cfg = tiny_config(Method::Apanets);
        cfg.rotation_class_head = true;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut tr = Trainer::new(&cfg, 16).unwrap();
        let sb = step_batch(&mut rng, 4, true);
        tr.train_step(&sb).unwrap();
        let ck = Checkpoint { model: tr.model.clone(), config: cfg.clone(), step: tr.step, rng_word_pos: 1234 };
        save_model(&path, &ck).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, ck);
        let probes: Vec<Raster> = (0..100).map(|_| rng_raster(&mut rng, 4)).collect();
        let t = images_to_tensor(&probes);
        let a = ck.model.raw_predictions(&t).unwrap();
        let b = back.model.raw_predictions(&t).unwrap();
        assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, [b"XXXXXX1".as_slice(), &bytes[7..]].concat()).unwrap();
        let e = load_model(&path).unwrap_err();
        assert!(e.to_string().contains("APANET1"), "{e}");
        std::fs::write(&path, [b"APANET9".as_slice(), &bytes[7..]].concat()).unwrap();
        assert!(matches!(load_model(&path), Err(ApanetError::UnsupportedVersion(_))));
        assert!(load_model(&path).unwrap_err().to_string().contains("unsupported version"));
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_model(&path), Err(ApanetError::Truncated(_))));
    }

    #[test]
    fn method_settings() {
        let c = TrainConfig { nu: 0.0, ..TrainConfig::default() };
        assert!(Method::Ss.settings(&c).is_err());
        let c = TrainConfig { nu: 0.2, ..TrainConfig::default() };
        assert_eq!(Method::Joint.settings(&c).unwrap().nu, 1.0);
        assert_eq!(Method::NoAdaptation.settings(&c).unwrap().alpha, 0.0);
        assert!(Method::Apanets.settings(&c).unwrap().self_supervised);
        assert!(TrainConfig { nu: 1.5, ..c.clone() }.validate().is_err());
        let d = TrainConfig::default();
        assert_eq!((d.lr, d.batch_size, d.alpha, d.init_s_t, d.init_s_q), (1e-5, 16, 1.0, 0.0, -1.0));
        let mut kv = KeyValues::default();
        c.to_key_values(&mut kv);
        assert_eq!(TrainConfig::from_key_values(&kv, TrainConfig::default()).unwrap(), c);
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let a = ApanetModel::new(&ArchConfig::default(), 256, false, 0.0, -1.0, 1);
        let b = ApanetModel::new(&ArchConfig::default(), 256, false, 0.0, -1.0, 2);
        assert_eq!(a.parameter_count(), b.parameter_count());
        let enc = 256 * 256 + 256 + 256 * 128 + 128;
        let reg = 128 * 1024 + 1024 + 2 * (1024 * 256 + 256) + 256 * 3 + 3 + 256 * 4 + 4;
        let disc = 128 * 1024 + 1024 + 1024 * 256 + 256 + 256 * 64 + 64 + 64 * 2 + 2;
        assert_eq!(a.parameter_count(), enc + reg + disc + 2);
    }
}
