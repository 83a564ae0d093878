//! Procedural scenes: landmark fields, camera trajectories and raster
//! observations.
//!
//! Every scene is a pure function of its [`SceneConfig`]. Randomness comes
//! from ChaCha8 streams keyed by the seed, one stream per purpose, so adding
//! draws to one purpose never perturbs another.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::KeyValues;
use crate::geometry::{norm3, sub3, EulerAngles, ImageRotation, Pose, Quaternion, Vec3};

pub const POSESYNTH_MAGIC: &str = "POSESYNTH v1";
const RASTER_MAGIC: &str = "POSESYNTH-RASTER v1";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("degenerate scene geometry: {blank} of {total} frames see no landmark")]
    DegenerateGeometry { blank: usize, total: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
}

/// PRNG purposes. Each one gets its own ChaCha stream.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Landmarks = 1,
    Trajectory = 2,
    Noise = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_landmarks: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Center of the camera position box.
    pub pose_center: Vec3,
    /// Half-widths of the camera position box.
    pub pose_extent: Vec3,
    /// Maximum perturbation of yaw, pitch and roll away from looking at the
    /// landmark centroid, in degrees.
    pub orientation_spread: f64,
    pub image_size: usize,
    pub focal: f64,
    /// Offset from `pose_center` to the center of the landmark box.
    pub landmark_offset: Vec3,
    pub landmark_extent: Vec3,
    /// Gaussian splat standard deviation in pixels.
    pub splat_sigma: f64,
    /// Shift training rasters by up to one pixel.
    pub jitter: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_landmarks: 24,
            n_train: 500,
            n_test: 100,
            pose_center: [0.0; 3],
            pose_extent: [2.0, 4.0, 1.0],
            orientation_spread: 10.0,
            image_size: 16,
            focal: 12.0,
            landmark_offset: [-12.0, 0.0, 0.0],
            landmark_extent: [3.0, 6.0, 3.0],
            splat_sigma: 0.8,
            jitter: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_landmarks == 0 || self.n_train == 0 || self.n_test == 0 {
            return bad("all counts must be at least 1");
        }
        if self.pose_extent.iter().chain(&self.landmark_extent).any(|e| !(*e > 0.0)) {
            return bad("extents must be positive");
        }
        if self.image_size == 0 || self.image_size % 2 != 0 {
            return bad("image_size must be a positive even number");
        }
        if !(self.focal > 0.0) || !(self.splat_sigma > 0.0) {
            return bad("focal and splat_sigma must be positive");
        }
        if !(self.orientation_spread >= 0.0) {
            return bad("orientation_spread must be nonnegative");
        }
        Ok(())
    }

    pub fn landmark_center(&self) -> Vec3 {
        [
            self.pose_center[0] + self.landmark_offset[0],
            self.pose_center[1] + self.landmark_offset[1],
            self.pose_center[2] + self.landmark_offset[2],
        ]
    }

    pub fn to_key_values(&self, kv: &mut KeyValues, section: &str) {
        let v3 = |v: &Vec3| format!("{},{},{}", v[0], v[1], v[2]);
        kv.set(section, "seed", self.seed.to_string());
        kv.set(section, "n_landmarks", self.n_landmarks.to_string());
        kv.set(section, "n_train", self.n_train.to_string());
        kv.set(section, "n_test", self.n_test.to_string());
        kv.set(section, "pose_center", v3(&self.pose_center));
        kv.set(section, "pose_extent", v3(&self.pose_extent));
        kv.set(section, "orientation_spread", self.orientation_spread.to_string());
        kv.set(section, "image_size", self.image_size.to_string());
        kv.set(section, "focal", self.focal.to_string());
        kv.set(section, "landmark_offset", v3(&self.landmark_offset));
        kv.set(section, "landmark_extent", v3(&self.landmark_extent));
        kv.set(section, "splat_sigma", self.splat_sigma.to_string());
        kv.set(section, "jitter", self.jitter.to_string());
    }

    /// Reads overrides from `section`, keeping defaults for absent keys.
    pub fn from_key_values(kv: &KeyValues, section: &str, base: SceneConfig) -> Result<Self, crate::config::ConfigError> {
        let mut c = base;
        kv.read_into(section, "seed", &mut c.seed)?;
        kv.read_into(section, "n_landmarks", &mut c.n_landmarks)?;
        kv.read_into(section, "n_train", &mut c.n_train)?;
        kv.read_into(section, "n_test", &mut c.n_test)?;
        kv.read_vec3(section, "pose_center", &mut c.pose_center)?;
        kv.read_vec3(section, "pose_extent", &mut c.pose_extent)?;
        kv.read_into(section, "orientation_spread", &mut c.orientation_spread)?;
        kv.read_into(section, "image_size", &mut c.image_size)?;
        kv.read_into(section, "focal", &mut c.focal)?;
        kv.read_vec3(section, "landmark_offset", &mut c.landmark_offset)?;
        kv.read_vec3(section, "landmark_extent", &mut c.landmark_extent)?;
        kv.read_into(section, "splat_sigma", &mut c.splat_sigma)?;
        kv.read_into(section, "jitter", &mut c.jitter)?;
        Ok(c)
    }
}

/// A point landmark with its splat brightness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: Vec3,
    pub intensity: f64,
}

/// Square single-channel image, row-major with the origin at the top-left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0.0; size * size] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.size + col] = v;
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn l1_distance(&self, other: &Raster) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Index of the brightest pixel as `(row, col)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best / self.size, best % self.size)
    }
}

/// Clockwise rotation by `k`. Lossless.
pub fn rotate_raster(image: &Raster, k: ImageRotation) -> Raster {
    let g = image.size;
    let mut out = image.clone();
    for _ in 0..k.index() {
        let src = out.clone();
        for r in 0..g {
            for c in 0..g {
                out.data[r * g + c] = src.data[(g - 1 - c) * g + r];
            }
        }
    }
    out
}

/// Shifts by `(dr, dc)` pixels with zero fill.
pub fn shift_raster(image: &Raster, dr: i64, dc: i64) -> Raster {
    let g = image.size as i64;
    let mut out = Raster::zeros(image.size);
    for r in 0..g {
        for c in 0..g {
            let (sr, sc) = (r - dr, c - dc);
            if (0..g).contains(&sr) && (0..g).contains(&sc) {
                out.data[(r * g + c) as usize] = image.data[(sr * g + sc) as usize];
            }
        }
    }
    out
}

/// Projects a world point into continuous pixel coordinates `(row, col)`.
/// Returns `None` for points at or behind the image plane.
pub fn project(pose: &Pose, point: Vec3, config: &SceneConfig) -> Option<(f64, f64)> {
    let cam = pose.q.inverse_rotate(sub3(point, pose.t));
    let depth = -cam[0];
    if depth <= 1e-6 {
        return None;
    }
    let center = (config.image_size as f64 - 1.0) / 2.0;
    let col = center + config.focal * cam[1] / depth;
    let row = center - config.focal * cam[2] / depth;
    Some((row, col))
}

/// Pinhole rendering of Gaussian landmark splats, normalized to a maximum
/// of 1.
pub fn render_observation(pose: &Pose, landmarks: &[Landmark], config: &SceneConfig) -> Raster {
    let g = config.image_size;
    let mut raster = Raster::zeros(g);
    let sigma = config.splat_sigma;
    let radius = 3.0 * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for lm in landmarks {
        let Some((row, col)) = project(pose, lm.position, config) else { continue };
        if row < -radius || col < -radius || row > g as f64 - 1.0 + radius || col > g as f64 - 1.0 + radius {
            continue;
        }
        let r0 = (row - radius).ceil().max(0.0) as usize;
        let r1 = ((row + radius).floor() as i64).min(g as i64 - 1);
        let c0 = (col - radius).ceil().max(0.0) as usize;
        let c1 = ((col + radius).floor() as i64).min(g as i64 - 1);
        if r1 < 0 || c1 < 0 {
            continue;
        }
        for r in r0..=r1 as usize {
            for c in c0..=c1 as usize {
                let d2 = (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
                if d2 <= radius * radius {
                    raster.data[r * g + c] += lm.intensity * (-d2 * inv).exp();
                }
            }
        }
    }
    let max = raster.max();
    if max > 0.0 {
        raster.data.iter_mut().for_each(|v| *v /= max);
    }
    raster
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image: Raster,
    pub pose: Pose,
    pub scene_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDataset {
    pub config: SceneConfig,
    pub landmarks: Vec<Landmark>,
    pub train: Vec<Observation>,
    pub test: Vec<Observation>,
}

fn uniform_in_box(rng: &mut ChaCha8Rng, center: Vec3, half: Vec3) -> Vec3 {
    let mut p = [0.0; 3];
    for i in 0..3 {
        p[i] = center[i] + half[i] * (2.0 * rng.gen::<f64>() - 1.0);
    }
    p
}

/// Orientation of a camera at `position` looking at `target`.
pub fn look_at(position: Vec3, target: Vec3) -> EulerAngles {
    let d = sub3(target, position);
    let n = norm3(d).max(1e-300);
    let dir = [d[0] / n, d[1] / n, d[2] / n];
    // The body x axis points away from the viewing direction.
    EulerAngles { yaw: (-dir[1]).atan2(-dir[0]), pitch: dir[2].clamp(-1.0, 1.0).asin(), roll: 0.0 }
}

/// Generates the landmark field and the train/test observations for one
/// scene. Scene ids default to 0; experiment code relabels them.
pub fn generate_scene(config: &SceneConfig) -> Result<SceneDataset, SynthError> {
    config.validate()?;
    let lm_center = config.landmark_center();

    let mut lm_rng = stream_rng(config.seed, Stream::Landmarks);
    let landmarks: Vec<Landmark> = (0..config.n_landmarks)
        .map(|_| Landmark {
            position: uniform_in_box(&mut lm_rng, lm_center, config.landmark_extent),
            intensity: 0.4 + 0.6 * lm_rng.gen::<f64>(),
        })
        .collect();
    let centroid = {
        let mut c = [0.0; 3];
        for lm in &landmarks {
            for i in 0..3 {
                c[i] += lm.position[i] / landmarks.len() as f64;
            }
        }
        c
    };

    let mut traj = stream_rng(config.seed, Stream::Trajectory);
    let mut noise = stream_rng(config.seed, Stream::Noise);
    let spread = config.orientation_spread.to_radians();
    let total = config.n_train + config.n_test;
    let mut observations = Vec::with_capacity(total);
    let mut blank = 0;
    for i in 0..total {
        let t = uniform_in_box(&mut traj, config.pose_center, config.pose_extent);
        let mut e = look_at(t, centroid);
        e.yaw += spread * (2.0 * traj.gen::<f64>() - 1.0);
        e.pitch += spread * (2.0 * traj.gen::<f64>() - 1.0);
        e.roll += spread * (2.0 * traj.gen::<f64>() - 1.0);
        let pose = Pose { t, q: Quaternion::from_euler(e) };
        let mut image = render_observation(&pose, &landmarks, config);
        if image.max() == 0.0 {
            blank += 1;
        }
        if config.jitter && i < config.n_train {
            let dr = noise.gen_range(-1i64..=1);
            let dc = noise.gen_range(-1i64..=1);
            image = shift_raster(&image, dr, dc);
        }
        observations.push(Observation { image, pose, scene_id: 0 });
    }
    if blank * 10 > total {
        return Err(SynthError::DegenerateGeometry { blank, total });
    }
    let test = observations.split_off(config.n_train);
    Ok(SceneDataset { config: config.clone(), landmarks, train: observations, test })
}

impl SceneDataset {
    pub fn with_scene_id(mut self, id: u32) -> Self {
        for o in self.train.iter_mut().chain(self.test.iter_mut()) {
            o.scene_id = id;
        }
        self
    }

    fn records(&self) -> impl Iterator<Item = (String, &Observation)> {
        let train = self.train.iter().enumerate().map(|(i, o)| (format!("train/{i:05}"), o));
        let test = self.test.iter().enumerate().map(|(i, o)| (format!("test/{i:05}"), o));
        train.chain(test)
    }

    /// Writes `poses.txt`, `rasters.txt` and `scene.cfg` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        let mut poses = BufWriter::new(fs::File::create(dir.join("poses.txt"))?);
        writeln!(poses, "{POSESYNTH_MAGIC}")?;
        writeln!(poses, "image_id tx ty tz qw qx qy qz scene_id")?;
        let mut rasters = BufWriter::new(fs::File::create(dir.join("rasters.txt"))?);
        writeln!(rasters, "{RASTER_MAGIC} {}", self.config.image_size)?;
        for (id, o) in self.records() {
            let [tx, ty, tz, qw, qx, qy, qz] = o.pose.to_array();
            writeln!(poses, "{id} {tx} {ty} {tz} {qw} {qx} {qy} {qz} {}", o.scene_id)?;
            let mut line = id.clone();
            for v in &o.image.data {
                write!(line, " {v}").unwrap();
            }
            writeln!(rasters, "{line}")?;
        }
        poses.flush()?;
        rasters.flush()?;
        let mut kv = KeyValues::default();
        self.config.to_key_values(&mut kv, "scene");
        let mut lm = String::new();
        for l in &self.landmarks {
            let _ = write!(lm, "{},{},{},{};", l.position[0], l.position[1], l.position[2], l.intensity);
        }
        kv.set("scene", "landmarks", lm.trim_end_matches(';').to_string());
        fs::write(dir.join("scene.cfg"), kv.to_string())?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, SynthError> {
        let fmt_err = |path: &Path, line: usize, msg: String| SynthError::Format {
            path: path.display().to_string(),
            line,
            msg,
        };
        let cfg_path = dir.join("scene.cfg");
        let kv = KeyValues::parse(&fs::read_to_string(&cfg_path)?)
            .map_err(|e| fmt_err(&cfg_path, 0, e.to_string()))?;
        let config = SceneConfig::from_key_values(&kv, "scene", SceneConfig::default())
            .map_err(|e| fmt_err(&cfg_path, 0, e.to_string()))?;
        let mut landmarks = Vec::new();
        if let Some(s) = kv.get("scene", "landmarks") {
            for item in s.split(';').filter(|s| !s.is_empty()) {
                let v: Vec<f64> = item
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| fmt_err(&cfg_path, 0, format!("landmark: {e}")))?;
                if v.len() != 4 {
                    return Err(fmt_err(&cfg_path, 0, "landmark needs 4 values".into()));
                }
                landmarks.push(Landmark { position: [v[0], v[1], v[2]], intensity: v[3] });
            }
        }

        let poses_path = dir.join("poses.txt");
        let reader = BufReader::new(fs::File::open(&poses_path)?);
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(l)) if l.trim() == POSESYNTH_MAGIC => {}
            _ => return Err(fmt_err(&poses_path, 1, format!("expected header `{POSESYNTH_MAGIC}`"))),
        }
        let mut entries: Vec<(String, Pose, u32)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() || toks[0] == "image_id" {
                continue;
            }
            if toks.len() != 9 {
                return Err(fmt_err(&poses_path, i + 2, "expected 9 fields".into()));
            }
            let v: Vec<f64> = toks[1..8]
                .iter()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| fmt_err(&poses_path, i + 2, e.to_string()))?;
            let scene_id: u32 = toks[8].parse().map_err(|e| fmt_err(&poses_path, i + 2, format!("{e}")))?;
            let pose = Pose { t: [v[0], v[1], v[2]], q: Quaternion::new(v[3], v[4], v[5], v[6]) };
            entries.push((toks[0].to_string(), pose, scene_id));
        }

        let raster_path = dir.join("rasters.txt");
        let reader = BufReader::new(fs::File::open(&raster_path)?);
        let mut lines = reader.lines();
        let size = match lines.next() {
            Some(Ok(l)) if l.starts_with(RASTER_MAGIC) => l[RASTER_MAGIC.len()..]
                .trim()
                .parse::<usize>()
                .map_err(|e| fmt_err(&raster_path, 1, e.to_string()))?,
            _ => return Err(fmt_err(&raster_path, 1, format!("expected header `{RASTER_MAGIC}`"))),
        };
        let mut images = std::collections::HashMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let mut toks = line.split_whitespace();
            let Some(id) = toks.next() else { continue };
            let data: Vec<f64> = toks
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| fmt_err(&raster_path, i + 2, e.to_string()))?;
            if data.len() != size * size {
                return Err(fmt_err(&raster_path, i + 2, format!("expected {} values", size * size)));
            }
            images.insert(id.to_string(), Raster { size, data });
        }

        let mut train = Vec::new();
        let mut test = Vec::new();
        for (id, pose, scene_id) in entries {
            let image = images
                .remove(&id)
                .ok_or_else(|| fmt_err(&raster_path, 0, format!("missing raster for {id}")))?;
            let obs = Observation { image, pose, scene_id };
            if id.starts_with("train/") {
                train.push(obs);
            } else {
                test.push(obs);
            }
        }
        Ok(SceneDataset { config, landmarks, train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> SceneConfig {
        SceneConfig { seed, n_train: 60, n_test: 20, ..SceneConfig::default() }
    }

    #[test]
    fn counts_and_determinism() {
        let cfg = SceneConfig { n_train: 500, n_test: 100, ..SceneConfig::default() };
        let a = generate_scene(&cfg).unwrap();
        assert_eq!(a.train.len(), 500);
        assert_eq!(a.test.len(), 100);
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.train[0].pose, c.train[0].pose);
    }

    #[test]
    fn offset_scenes_are_disjoint() {
        let a = generate_scene(&small_config(1)).unwrap();
        let b = generate_scene(&SceneConfig { pose_center: [100.0, 0.0, 0.0], ..small_config(2) }).unwrap();
        let mut min = f64::INFINITY;
        for oa in a.train.iter().chain(&a.test) {
            for ob in b.train.iter().chain(&b.test) {
                min = min.min(norm3(sub3(oa.pose.t, ob.pose.t)));
            }
        }
        assert!(min > 50.0, "min distance {min}");
    }

    #[test]
    fn on_axis_landmark_hits_center() {
        let cfg = SceneConfig { image_size: 16, ..SceneConfig::default() };
        let lm = [Landmark { position: [-5.0, 0.0, 0.0], intensity: 1.0 }];
        let r = render_observation(&Pose::IDENTITY, &lm, &cfg);
        let (row, col) = r.argmax();
        // The exact center falls between pixels 7 and 8.
        assert!((7..=8).contains(&row) && (7..=8).contains(&col));
        assert_eq!(r.max(), 1.0);
        let v = r.get(7, 7);
        assert!([r.get(7, 8), r.get(8, 7), r.get(8, 8)].iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn landmarks_behind_camera_render_black() {
        let cfg = SceneConfig::default();
        let lm: Vec<Landmark> = (0..5).map(|i| Landmark { position: [3.0 + i as f64, 0.5, 0.0], intensity: 1.0 }).collect();
        let r = render_observation(&Pose::IDENTITY, &lm, &cfg);
        assert_eq!(r.mass(), 0.0);
    }

    #[test]
    fn roll_matches_raster_rotation() {
        let scene = generate_scene(&small_config(3)).unwrap();
        for o in scene.train.iter().take(20) {
            for k in ImageRotation::ALL {
                let rendered = render_observation(&o.pose.rotate_image(k), &scene.landmarks, &scene.config);
                let rotated = rotate_raster(&o.image, k);
                assert!(rotated.l1_distance(&rendered) < 0.05 * o.image.mass());
            }
        }
    }

    #[test]
    fn raster_rotation_definition() {
        let mut r = Raster::zeros(8);
        r.set(0, 0, 1.0);
        assert_eq!(rotate_raster(&r, ImageRotation::R0), r);
        let q = rotate_raster(&r, ImageRotation::R90);
        assert_eq!(q.get(0, 7), 1.0);
        let mut four = r.clone();
        for _ in 0..4 {
            four = rotate_raster(&four, ImageRotation::R90);
        }
        assert_eq!(four, r);
        assert_eq!(rotate_raster(&r, ImageRotation::R270), rotate_raster(&q, ImageRotation::R180));
    }

    #[test]
    fn camera_inside_landmarks_is_degenerate() {
        let cfg = SceneConfig {
            landmark_offset: [0.0; 3],
            landmark_extent: [20.0, 20.0, 20.0],
            orientation_spread: 180.0,
            n_landmarks: 2,
            ..small_config(4)
        };
        assert!(matches!(generate_scene(&cfg), Err(SynthError::DegenerateGeometry { .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_scene(&SceneConfig { image_size: 15, ..SceneConfig::default() }).is_err());
        assert!(generate_scene(&SceneConfig { n_train: 0, ..SceneConfig::default() }).is_err());
    }

    #[test]
    fn dataset_file_roundtrip() {
        let scene = generate_scene(&small_config(5)).unwrap().with_scene_id(1);
        let dir = tempfile::tempdir().unwrap();
        scene.write_dir(dir.path()).unwrap();
        let back = SceneDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back, scene);
        let text = fs::read_to_string(dir.path().join("poses.txt")).unwrap();
        assert!(text.starts_with("POSESYNTH v1\n"));
    }

    #[test]
    fn jitter_only_touches_training_rasters() {
        let plain = generate_scene(&small_config(6)).unwrap();
        let jit = generate_scene(&SceneConfig { jitter: true, ..small_config(6) }).unwrap();
        assert_eq!(plain.test, jit.test);
        assert!(plain.train.iter().zip(&jit.train).any(|(a, b)| a.image != b.image));
    }
}
