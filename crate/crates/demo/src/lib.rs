//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns flat `f64` arrays so the page
//! needs no glue beyond what `wasm-bindgen` generates.

use poseadapt::geometry::{EulerAngles, ImageRotation, Pose, Quaternion};
use poseadapt::pose_analysis::{coverage_fraction, mean_pairwise_distance, to_6d, Pose6D};
use poseadapt::synth::{generate_scene, look_at, render_observation, rotate_raster, SceneConfig, SceneDataset};
use wasm_bindgen::prelude::*;

fn scene(seed: u64, center_x: f64, n: usize) -> Result<SceneDataset, String> {
    let config = SceneConfig { seed, n_train: n, n_test: n, pose_center: [center_x, 0.0, 0.0], image_size: 32, focal: 24.0, ..SceneConfig::default() };
    generate_scene(&config).map_err(|e| e.to_string())
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn degrees(yaw: f64, pitch: f64, roll: f64) -> EulerAngles {
    EulerAngles { yaw: yaw.to_radians(), pitch: pitch.to_radians(), roll: roll.to_radians() }
}

fn pose_summary(p: &Pose) -> Vec<f64> {
    let e = p.q.to_euler().angles;
    vec![p.t[0], p.t[1], p.t[2], p.q.w, p.q.x, p.q.y, p.q.z, e.yaw.to_degrees(), e.pitch.to_degrees(), e.roll.to_degrees()]
}

/// Renders the landmark field of scene `seed` from a camera at `(x, y, z)`
/// whose orientation is the look-at direction perturbed by the given angles,
/// then rotates the image by `quarter_turns` × 90°.
///
/// Returns `[size, pose summary (10 values), pixels...]` where the pose is
/// the label of the rotated image.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn render_view(seed: u32, x: f64, y: f64, z: f64, d_yaw: f64, d_pitch: f64, d_roll: f64, quarter_turns: u32) -> Result<Vec<f64>, JsError> {
    render(seed, [x, y, z], [d_yaw, d_pitch, d_roll], quarter_turns).map_err(js)
}

fn render(seed: u32, [x, y, z]: [f64; 3], [d_yaw, d_pitch, d_roll]: [f64; 3], quarter_turns: u32) -> Result<Vec<f64>, String> {
    let ds = scene(seed as u64, 0.0, 1)?;
    let base = look_at([x, y, z], ds.config.landmark_center());
    let e = EulerAngles { yaw: base.yaw + d_yaw.to_radians(), pitch: base.pitch + d_pitch.to_radians(), roll: base.roll + d_roll.to_radians() };
    let pose = Pose { t: [x, y, z], q: Quaternion::from_euler(e) };
    let k = ImageRotation::from_index(quarter_turns as usize);
    let image = rotate_raster(&render_observation(&pose, &ds.landmarks, &ds.config), k);
    let mut out = vec![image.size as f64];
    out.extend(pose_summary(&pose.rotate_image(k)));
    out.extend(image.data);
    Ok(out)
}

/// Relative pose of camera B in the frame of camera A, with the position and
/// orientation errors between them. Angles are in degrees.
///
/// Returns `[relative pose summary (10 values), position error, orientation error]`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn relative_view(ax: f64, ay: f64, az: f64, a_yaw: f64, a_pitch: f64, a_roll: f64, bx: f64, by: f64, bz: f64, b_yaw: f64, b_pitch: f64, b_roll: f64) -> Vec<f64> {
    let a = Pose { t: [ax, ay, az], q: Quaternion::from_euler(degrees(a_yaw, a_pitch, a_roll)) };
    let b = Pose { t: [bx, by, bz], q: Quaternion::from_euler(degrees(b_yaw, b_pitch, b_roll)) };
    let rel = a.relative_to_frame(&b);
    let err = b.errors_against(&a);
    let mut out = pose_summary(&rel);
    out.push(err.position_error);
    out.push(err.orientation_error);
    out
}

/// Coverage of the target scene's test poses by the source scene's training
/// poses at `steps` evenly spaced thresholds up to twice the mean pairwise distance of
/// the references. The target camera box is centered `offset` meters away.
///
/// Returns `[tau_0, coverage_0, tau_1, coverage_1, ...]`.
#[wasm_bindgen]
pub fn coverage_curve(offset: f64, rho: f64, steps: u32) -> Result<Vec<f64>, JsError> {
    coverage(offset, rho, steps).map_err(js)
}

fn coverage(offset: f64, rho: f64, steps: u32) -> Result<Vec<f64>, String> {
    let cloud = |ds: &[poseadapt::synth::Observation]| -> Vec<Pose6D> { ds.iter().map(|o| to_6d(&o.pose)).collect() };
    let refs = cloud(&scene(1, 0.0, 150)?.train);
    let queries = cloud(&scene(2, offset, 150)?.test);
    let js = |e: poseadapt::pose_analysis::AnalysisError| e.to_string();
    let scale = mean_pairwise_distance(&refs, rho).map_err(js)?;
        let mut out = Vec::with_capacity(2 * steps as usize);
    for i in 0..steps {
        let tau = 2.0 * scale * (i + 1) as f64 / steps as f64;
        out.push(tau);
        out.push(coverage_fraction(&queries, &refs, tau, rho).map_err(js)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_layout() {
        let v = render(3, [0.0; 3], [0.0; 3], 1).unwrap();
        let size = v[0] as usize;
        assert_eq!(v.len(), 1 + 10 + size * size);
        assert!(v[11..].iter().any(|&p| p > 0.0));
    }

    #[test]
    fn quarter_turns_wrap() {
        let a = render(3, [1.0, 0.5, 0.0], [5.0, 0.0, 0.0], 0).unwrap();
        let b = render(3, [1.0, 0.5, 0.0], [5.0, 0.0, 0.0], 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_cameras_have_identity_relative_pose() {
        let v = relative_view(1.0, 2.0, 3.0, 10.0, 20.0, 30.0, 1.0, 2.0, 3.0, 10.0, 20.0, 30.0);
        assert!(v[..3].iter().all(|t| t.abs() < 1e-12));
        assert!((v[3] - 1.0).abs() < 1e-12);
        assert!(v[10] < 1e-12 && v[11] < 1e-6);
    }

    #[test]
    fn coverage_grows_with_tau_and_shrinks_with_offset() {
        let near = coverage(0.0, 1.0, 8).unwrap();
        let far = coverage(20.0, 1.0, 8).unwrap();
        let cov = |v: &[f64]| v.chunks(2).map(|c| c[1]).collect::<Vec<_>>();
        let (n, f) = (cov(&near), cov(&far));
        assert!(n.windows(2).all(|w| w[0] <= w[1]));
        assert!(n.iter().zip(&f).all(|(a, b)| a >= b));
        assert!(n[7] > 0.9);
    }
}
