//! Deterministic synthetic scenes: ray-cast LiDAR returns against oriented
//! boxes on a ground plane, a matching camera calibration, and a smooth
//! seeded feature map standing in for an image encoder's output.
//!
//! Everything derives from one 64-bit seed through the fixed generators in
//! [`crate::rng`], so regenerated scenes are bit-identical across runs and
//! platforms. The sensor sits at the origin of a KITTI-style frame
//! (x forward, y left, z up) with the ground plane at z = -1.73 m.

use crate::analytics::{Difficulty, OrientedBox};
use crate::calib::KittiCalibration;
use crate::error::{Error, Result};
use crate::rng::Xoshiro256StarStar;
use crate::tensor::FeatureMap;

/// Height of the sensor above the ground plane, meters.
pub const GROUND_Z: f64 = -1.73;

const STREAM_BOXES: u64 = 1;
const STREAM_REFLECTANCE: u64 = 2;
const STREAM_FEATURES: u64 = 3;

/// Pinhole camera the scene is rendered for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Spinning-scanner beam model. Elevations are evenly spaced over the
/// configured span; azimuths step from min (inclusive) to max (exclusive).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamModel {
    pub vertical_beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_min_deg: f64,
    pub azimuth_max_deg: f64,
    pub azimuth_step_deg: f64,
    pub max_range: f64,
}

/// Full scene recipe; see [`SceneSpec::default`] for the stock desk-scale
/// setup (64 beams, frontal 90 degree sweep, 640x192 camera).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub object_count: usize,
    /// Box center placement range along x (forward), meters.
    pub placement_x: [f64; 2],
    /// Box center placement range along y (left), meters.
    pub placement_y: [f64; 2],
    pub camera: CameraSpec,
    pub beams: BeamModel,
    /// Gaussian bumps per feature-map channel.
    pub feature_bumps: usize,
    /// Bound on the absolute value of the generated feature field.
    pub feature_amplitude: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            object_count: 8,
            placement_x: [8.0, 55.0],
            placement_y: [-14.0, 14.0],
            camera: CameraSpec {
                width: 640,
                height: 192,
                fx: 580.0,
                fy: 580.0,
                cx: 320.0,
                cy: 96.0,
            },
            beams: BeamModel {
                vertical_beams: 64,
                elevation_min_deg: -24.8,
                elevation_max_deg: 2.0,
                azimuth_min_deg: -45.0,
                azimuth_max_deg: 45.0,
                azimuth_step_deg: 0.2,
                max_range: 75.0,
            },
            feature_bumps: 24,
            feature_amplitude: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beams.vertical_beams < 1 {
            return Err(Error::Argument("beam count must be >= 1".into()));
        }
        if !(self.beams.max_range > 0.0) || !(self.beams.azimuth_step_deg > 0.0) {
            return Err(Error::Argument("beam ranges and step must be positive".into()));
        }
        if self.beams.elevation_max_deg < self.beams.elevation_min_deg
            || self.beams.azimuth_max_deg <= self.beams.azimuth_min_deg
        {
            return Err(Error::Argument("beam angle spans must be non-empty".into()));
        }
        if self.camera.width < 16 || self.camera.height < 16 {
            return Err(Error::Argument("camera extents must be >= 16".into()));
        }
        if self.camera.width % 4 != 0 || self.camera.height % 4 != 0 {
            return Err(Error::Argument(
                "camera extents must be divisible by 4 (quarter-resolution features)".into(),
            ));
        }
        if !(self.camera.fx > 0.0) || !(self.camera.fy > 0.0) {
            return Err(Error::Argument("camera focal lengths must be positive".into()));
        }
        if self.placement_x[1] < self.placement_x[0] || self.placement_y[1] < self.placement_y[0] {
            return Err(Error::Argument("placement ranges must be non-empty".into()));
        }
        if !(self.feature_amplitude >= 0.0) {
            return Err(Error::Argument("feature amplitude must be >= 0".into()));
        }
        Ok(())
    }
}

/// A generated scene: LiDAR returns `(x, y, z, reflectance)`, the boxes the
/// rays were cast against, per-box difficulty labels, and the calibration
/// that projects the points onto the camera.
#[derive(Clone, Debug)]
pub struct Scene {
    pub points: Vec<[f64; 4]>,
    pub boxes: Vec<OrientedBox>,
    pub difficulties: Vec<Difficulty>,
    pub calib: KittiCalibration,
}

impl Scene {
    /// Points converted to the on-disk f32 record layout.
    pub fn points_f32(&self) -> Vec<[f32; 4]> {
        self.points
            .iter()
            .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32, p[3] as f32])
            .collect()
    }
}

/// KITTI-style calibration for the spec's camera: identity rectification
/// and the axis permutation from LiDAR (x fwd, y left, z up) to camera
/// (x right, y down, z forward).
pub fn camera_calibration(camera: &CameraSpec) -> KittiCalibration {
    let p2 = [
        [camera.fx, 0.0, camera.cx, 0.0],
        [0.0, camera.fy, camera.cy, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ];
    let r0 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let tr = [
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ];
    KittiCalibration::new(p2, r0, tr).expect("static calibration is finite")
}

fn sample_boxes(spec: &SceneSpec) -> (Vec<OrientedBox>, Vec<Difficulty>) {
    let mut rng = Xoshiro256StarStar::stream(spec.seed, STREAM_BOXES);
    let mut boxes = Vec::with_capacity(spec.object_count);
    let mut difficulties = Vec::with_capacity(spec.object_count);
    for _ in 0..spec.object_count {
        let cx = rng.uniform(spec.placement_x[0], spec.placement_x[1]);
        let cy = rng.uniform(spec.placement_y[0], spec.placement_y[1]);
        // car-like footprint with +/-15% jitter
        let sx = 3.9 * rng.uniform(0.85, 1.15);
        let sy = 1.6 * rng.uniform(0.85, 1.15);
        let sz = 1.56 * rng.uniform(0.85, 1.15);
        let yaw = rng.uniform(0.0, std::f64::consts::TAU);
        let b = OrientedBox {
            center: [cx, cy, GROUND_Z + sz / 2.0],
            size: [sx, sy, sz],
            yaw,
        };
        let range = (cx * cx + cy * cy).sqrt();
        difficulties.push(if range < 20.0 {
            Difficulty::Easy
        } else if range < 40.0 {
            Difficulty::Moderate
        } else {
            Difficulty::Hard
        });
        boxes.push(b);
    }
    (boxes, difficulties)
}

/// Distance along `dir` (unit, from the origin) to the box, if hit.
/// Slab test in the box frame.
pub fn ray_box_intersection(dir: [f64; 3], b: &OrientedBox) -> Option<f64> {
    let (s, c) = (-b.yaw).sin_cos();
    let rot = |v: [f64; 3]| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
    let o = rot([-b.center[0], -b.center[1], -b.center[2]]);
    let d = rot(dir);
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for a in 0..3 {
        let half = b.size[a] / 2.0;
        if d[a].abs() < 1e-12 {
            if o[a] < -half || o[a] >= half {
                return None;
            }
            continue;
        }
        let mut t1 = (-half - o[a]) / d[a];
        let mut t2 = (half - o[a]) / d[a];
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        t_lo = t_lo.max(t1);
        t_hi = t_hi.min(t2);
    }
    (t_hi >= t_lo && t_lo > 1e-9).then_some(t_lo)
}

/// Distance to the ground plane `z = GROUND_Z`, if the ray points down.
pub fn ray_ground_intersection(dir: [f64; 3]) -> Option<f64> {
    (dir[2] < -1e-12).then(|| GROUND_Z / dir[2])
}

/// Cast all configured beams and return the scene. Per seed the output is
/// bit-identical across runs.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (boxes, difficulties) = sample_boxes(spec);
    let mut refl_rng = Xoshiro256StarStar::stream(spec.seed, STREAM_REFLECTANCE);
    let box_reflectance: Vec<f64> = (0..boxes.len())
        .map(|_| refl_rng.uniform(0.2, 0.9))
        .collect();
    const GROUND_REFLECTANCE: f64 = 0.1;

    let b = &spec.beams;
    let mut points = Vec::new();
    for beam in 0..b.vertical_beams {
        let el_deg = if b.vertical_beams == 1 {
            b.elevation_min_deg
        } else {
            b.elevation_min_deg
                + (b.elevation_max_deg - b.elevation_min_deg) * beam as f64
                    / (b.vertical_beams - 1) as f64
        };
        let el = el_deg.to_radians();
        let (sin_el, cos_el) = el.sin_cos();
        let mut az_deg = b.azimuth_min_deg;
        while az_deg < b.azimuth_max_deg {
            let az = az_deg.to_radians();
            let dir = [cos_el * az.cos(), cos_el * az.sin(), sin_el];
            let mut best: Option<(f64, f64)> = ray_ground_intersection(dir)
                .filter(|&t| t <= b.max_range)
                .map(|t| (t, GROUND_REFLECTANCE));
            for (i, bx) in boxes.iter().enumerate() {
                if let Some(t) = ray_box_intersection(dir, bx) {
                    if t <= b.max_range && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, box_reflectance[i]));
                    }
                }
            }
            if let Some((t, refl)) = best {
                points.push([t * dir[0], t * dir[1], t * dir[2], refl]);
            }
            az_deg += b.azimuth_step_deg;
        }
    }

    Ok(Scene {
        points,
        boxes,
        difficulties,
        calib: camera_calibration(&spec.camera),
    })
}

/// Smooth seeded feature field at quarter resolution: `channels` planes of
/// `width/4 x height/4`, each a sum of Gaussian bumps whose amplitudes are
/// scaled so the field never exceeds `feature_amplitude` in magnitude.
pub fn generate_feature_map(spec: &SceneSpec, channels: usize) -> Result<FeatureMap> {
    spec.validate()?;
    if channels == 0 {
        return Err(Error::Argument("feature map needs channels >= 1".into()));
    }
    let (w, h) = (spec.camera.width / 4, spec.camera.height / 4);
    let mut data = vec![0.0; w * h * channels];
    let mut rng = Xoshiro256StarStar::stream(spec.seed, STREAM_FEATURES);
    let per_bump = spec.feature_amplitude / spec.feature_bumps.max(1) as f64;
    for ch in 0..channels {
        for _ in 0..spec.feature_bumps {
            let u0 = rng.uniform(0.0, w as f64);
            let v0 = rng.uniform(0.0, h as f64);
            let sigma = rng.uniform(1.0, (w.max(h) as f64 / 4.0).max(2.0));
            let amp = rng.uniform(-per_bump, per_bump);
            let inv = 1.0 / (2.0 * sigma * sigma);
            for u in 0..w {
                for v in 0..h {
                    let du = u as f64 - u0;
                    let dv = v as f64 - v0;
                    data[(u * h + v) * channels + ch] += amp * (-(du * du + dv * dv) * inv).exp();
                }
            }
        }
    }
    FeatureMap::new(w, h, channels, data)
}
