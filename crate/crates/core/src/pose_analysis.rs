//! Pose-file parsing and the pose-space sparsity statistics: anchor-relative
//! 6D clouds, nearest-neighbour coverage and voxel occupancy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::KeyValues;
use crate::geometry::{relative_pose, norm3, sub3, Pose, Quaternion, Vec3};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unrecognized pose file {0}")]
    Unrecognized(String),
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Largest accepted deviation of a quaternion norm from 1 before a warning.
pub const QUATERNION_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub image_id: String,
    pub pose: Pose,
    pub scene: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedPoses {
    pub records: Vec<PoseRecord>,
    /// Skipped lines and renormalized quaternions, with line numbers.
    pub warnings: Vec<String>,
}

fn data_line(toks: &[&str]) -> bool {
    toks.len() >= 8 && toks[toks.len() - 7..].iter().all(|t| t.parse::<f64>().is_ok())
}

/// Parses a Cambridge-style pose listing (`image_id tx ty tz qw qx qy qz`).
///
/// Leading lines are skipped until the first line that looks like data.
/// A ninth token, as in synthesized scene files, becomes the scene name;
/// otherwise `scene` is used.
pub fn parse_pose_text(text: &str, source: &str, scene: &str, mode: ParseMode) -> Result<ParsedPoses, AnalysisError> {
    let mut out = ParsedPoses::default();
    let mut started = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if !started {
            if !data_line(&toks) {
                continue;
            }
            started = true;
        }
        if toks.is_empty() {
            continue;
        }
        let parsed = parse_record(&toks, scene);
        match parsed {
            Ok((rec, renormalized)) => {
                if let Some(n) = renormalized {
                    out.warnings.push(format!("{source}:{line_no}: quaternion norm {n} renormalized"));
                }
                out.records.push(rec);
            }
            Err(msg) => match mode {
                ParseMode::Strict => {
                    return Err(AnalysisError::Malformed { path: source.to_string(), line: line_no, msg });
                }
                ParseMode::Lenient => out.warnings.push(format!("{source}:{line_no}: skipped ({msg})")),
            },
        }
    }
    if out.records.is_empty() {
        return Err(AnalysisError::Unrecognized(source.to_string()));
    }
    Ok(out)
}

fn parse_record(toks: &[&str], scene: &str) -> Result<(PoseRecord, Option<f64>), String> {
    if toks.len() < 8 {
        return Err(format!("expected at least 8 fields, found {}", toks.len()));
    }
    let mut v = [0.0; 7];
    for (slot, t) in v.iter_mut().zip(&toks[1..8]) {
        *slot = t.parse::<f64>().map_err(|_| format!("`{t}` is not a number"))?;
        if !slot.is_finite() {
            return Err(format!("`{t}` is not finite"));
        }
    }
    let q = Quaternion::new(v[3], v[4], v[5], v[6]);
    let n = q.norm();
    let q = q.normalize().map_err(|e| e.to_string())?;
    let warn = ((n - 1.0).abs() > QUATERNION_TOLERANCE).then_some(n);
    let scene = toks.get(8).map_or(scene, |s| *s).to_string();
    Ok((PoseRecord { image_id: toks[0].to_string(), pose: Pose { t: [v[0], v[1], v[2]], q }, scene }, warn))
}

/// Reads a pose file; the scene name defaults to the parent directory name.
pub fn parse_pose_file(path: &Path, mode: ParseMode) -> Result<ParsedPoses, AnalysisError> {
    let text = fs::read_to_string(path).map_err(|source| AnalysisError::Io { path: path.display().to_string(), source })?;
    let scene = path
        .parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_pose_text(&text, &path.display().to_string(), &scene, mode)
}

/// Renders records in the Cambridge layout, three header lines first.
pub fn format_pose_file(records: &[PoseRecord]) -> String {
    let mut s = String::from("Camera poses\nImageFile, Camera Position [X Y Z W P Q R]\n\n");
    for r in records {
        let [tx, ty, tz, qw, qx, qy, qz] = r.pose.to_array();
        let _ = writeln!(s, "{} {tx} {ty} {tz} {qw} {qx} {qy} {qz}", r.image_id);
    }
    s
}

/// Position in meters and rotation vector in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    pub translation: Vec3,
    pub rotation: Vec3,
}

impl Pose6D {
    /// Point in the scaled space where distances are measured.
    pub fn scaled(&self, rho: f64) -> [f64; 6] {
        let (t, r) = (self.translation, self.rotation);
        [t[0], t[1], t[2], rho * r[0], rho * r[1], rho * r[2]]
    }

    /// `sqrt(|Δt|² + ρ²·|Δr|²)`.
    pub fn distance(&self, other: &Pose6D, rho: f64) -> f64 {
        dist6(&self.scaled(rho), &other.scaled(rho))
    }
}

fn dist6(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    let mut s = 0.0;
    for i in 0..6 {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

pub fn to_6d(p: &Pose) -> Pose6D {
    Pose6D { translation: p.t, rotation: p.q.to_rotation_vector() }
}

/// Every record expressed relative to its nearest anchor (by position),
/// where anchors are every `stride`-th record in file order.
pub fn relative_cloud(records: &[PoseRecord], stride: usize) -> Result<Vec<Pose6D>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty("pose records"));
    }
    if stride == 0 {
        return Err(AnalysisError::InvalidArgument("anchor stride must be at least 1".into()));
    }
    let anchors: Vec<&Pose> = records.iter().step_by(stride).map(|r| &r.pose).collect();
    Ok(records
        .iter()
        .map(|r| {
            let mut best = anchors[0];
            let mut best_d = norm3(sub3(best.t, r.pose.t));
            for a in &anchors[1..] {
                let d = norm3(sub3(a.t, r.pose.t));
                if d < best_d {
                    best = a;
                    best_d = d;
                }
            }
            to_6d(&relative_pose(best, &r.pose))
        })
        .collect())
}

/// Fraction of `queries` with at least one reference within distance `tau`.
pub fn coverage_fraction(queries: &[Pose6D], references: &[Pose6D], tau: f64, rho: f64) -> Result<f64, AnalysisError> {
    if queries.is_empty() || references.is_empty() {
        return Err(AnalysisError::Empty("coverage needs queries and references"));
    }
    if !(tau > 0.0) {
        return Err(AnalysisError::InvalidArgument(format!("tau must be positive (got {tau})")));
    }
    let refs: Vec<[f64; 6]> = references.iter().map(|r| r.scaled(rho)).collect();
    let covered = |q: &Pose6D| {
        let q = q.scaled(rho);
        refs.iter().any(|r| dist6(&q, r) <= tau)
    };
    #[cfg(feature = "parallel")]
    let hits = {
        use rayon::prelude::*;
        queries.par_iter().filter(|q| covered(q)).count()
    };
    #[cfg(not(feature = "parallel"))]
    let hits = queries.iter().filter(|q| covered(q)).count();
    Ok(hits as f64 / queries.len() as f64)
}

/// Mean distance over all unordered pairs.
pub fn mean_pairwise_distance(cloud: &[Pose6D], rho: f64) -> Result<f64, AnalysisError> {
    if cloud.len() < 2 {
        return Err(AnalysisError::Empty("mean pairwise distance needs at least 2 points"));
    }
    let pts: Vec<[f64; 6]> = cloud.iter().map(|p| p.scaled(rho)).collect();
    let mut sum = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            sum += dist6(&pts[i], &pts[j]);
        }
    }
    let n = pts.len() as f64;
    Ok(sum / (n * (n - 1.0) / 2.0))
}

/// Cell indices per axis of cells that can touch the ball. Cells have edge
/// `r/√6`, so the ball spans `√6` cells each way from the centroid.
const CELL_RANGE: std::ops::RangeInclusive<i64> = -3..=2;

fn nearest_offset(k: i64) -> f64 {
    // Distance, in cell edges, from 0 to the interval [k, k+1].
    if k >= 0 {
        k as f64
    } else if k < 0 {
        -(k + 1) as f64
    } else {
        0.0
    }
}

fn cell_in_ball(k: &[i64; 6]) -> bool {
    // |nearest point|² ≤ r² with r = √6 edges.
    k.iter().map(|&k| nearest_offset(k).powi(2)).sum::<f64>() <= 6.0
}

/// Number of grid cells intersecting the ball.
pub fn cells_in_ball() -> usize {
    let mut n = 0;
    for_each_cell(|k| n += cell_in_ball(k) as usize);
    n
}

fn for_each_cell(mut f: impl FnMut(&[i64; 6])) {
    let span: Vec<i64> = CELL_RANGE.collect();
    let m = span.len();
    let mut k = [0i64; 6];
    for code in 0..m.pow(6) {
        let mut c = code;
        for slot in k.iter_mut() {
            *slot = span[c % m];
            c /= m;
        }
        f(&k);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupancy {
    pub radius: f64,
    pub occupied: usize,
    pub total: usize,
}

impl Occupancy {
    pub fn fraction(&self) -> f64 {
        self.occupied as f64 / self.total as f64
    }
}

/// Voxel estimate of how much of the radius-`r` ball around the centroid the
/// cloud occupies. `r` defaults to the mean pairwise distance.
pub fn occupancy_estimate(cloud: &[Pose6D], radius: Option<f64>, rho: f64) -> Result<Occupancy, AnalysisError> {
    if cloud.len() < 2 {
        return Err(AnalysisError::Empty("occupancy needs at least 2 points"));
    }
    let r = match radius {
        Some(r) if !(r >= 0.0) => return Err(AnalysisError::InvalidArgument(format!("radius must be non-negative (got {r})"))),
        Some(r) => r,
        None => mean_pairwise_distance(cloud, rho)?,
    };
    let pts: Vec<[f64; 6]> = cloud.iter().map(|p| p.scaled(rho)).collect();
    let mut centroid = [0.0; 6];
    for p in &pts {
        for i in 0..6 {
            centroid[i] += p[i] / pts.len() as f64;
        }
    }
    let edge = r / 6f64.sqrt();
    let mut occupied = std::collections::BTreeSet::new();
    for p in &pts {
        let mut k = [0i64; 6];
        for i in 0..6 {
            // A zero radius collapses the grid onto the centroid cell.
            k[i] = if edge > 0.0 { ((p[i] - centroid[i]) / edge).floor() as i64 } else { 0 };
        }
        if k.iter().all(|v| CELL_RANGE.contains(v)) && cell_in_ball(&k) {
            occupied.insert(k);
        }
    }
    Ok(Occupancy { radius: r, occupied: occupied.len(), total: cells_in_ball() })
}

/// Parameters and results of one coverage analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSummary {
    pub n_queries: usize,
    pub n_references: usize,
    pub anchor_stride: usize,
    pub rho: f64,
    pub tau: f64,
    pub coverage: f64,
    pub occupancy_radius: f64,
    pub occupancy: f64,
}

impl AnalysisSummary {
    fn fields(&self) -> [(&'static str, String); 8] {
        [
            ("n_queries", self.n_queries.to_string()),
            ("n_references", self.n_references.to_string()),
            ("anchor_stride", self.anchor_stride.to_string()),
            ("rho", self.rho.to_string()),
            ("tau", self.tau.to_string()),
            ("coverage", self.coverage.to_string()),
            ("occupancy_radius", self.occupancy_radius.to_string()),
            ("occupancy", self.occupancy.to_string()),
        ]
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        for (k, v) in self.fields() {
            kv.set("analysis", k, v);
        }
        kv
    }

    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let header: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let row: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

/// Coverage of the query cloud by the reference cloud and occupancy of the
/// reference cloud. `tau` defaults to the reference mean pairwise distance.
pub fn analyze(
    queries: &[PoseRecord],
    references: &[PoseRecord],
    anchor_stride: usize,
    rho: f64,
    tau: Option<f64>,
) -> Result<AnalysisSummary, AnalysisError> {
    let q = relative_cloud(queries, anchor_stride)?;
    let r = relative_cloud(references, anchor_stride)?;
    let tau = match tau {
        Some(t) => t,
        None => mean_pairwise_distance(&r, rho)?,
    };
    let occ = occupancy_estimate(&r, Some(tau), rho)?;
    Ok(AnalysisSummary {
        n_queries: q.len(),
        n_references: r.len(),
        anchor_stride,
        rho,
        tau,
        coverage: coverage_fraction(&q, &r, tau, rho)?,
        occupancy_radius: occ.radius,
        occupancy: occ.fraction(),
    })
}
