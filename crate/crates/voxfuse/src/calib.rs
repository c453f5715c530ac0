//! Camera calibration, 3D-to-2D projection, and point-cloud augmentation
//! inversion, plus the KITTI-style file formats that carry them.
//!
//! Two calibration realizations share one projection path:
//!
//! * [`CalibrationMatrix`] — a generic pinhole `K [R | T]` chain with a
//!   pixel scale factor, for synthetic scenes.
//! * [`KittiCalibration`] — the `P2 . R0_rect . Tr_velo_to_cam` composite
//!   used by KITTI-format data.
//!
//! A point projects as `z_c [u v 1]^T = K [R T] [P 1]^T`; the scale factor
//! `h` multiplies the pixel coordinates after perspective division (it
//! models feature-map downsampling, which rescales pixels, not depth).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

type Mat3 = [[f64; 3]; 3];
type Mat34 = [[f64; 4]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Generic pinhole calibration: intrinsics `K`, rotation `R`, translation
/// `T` (meters), and pixel scale `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationMatrix {
    k: Mat3,
    r: Mat3,
    t: [f64; 3],
    h: f64,
}

impl CalibrationMatrix {
    /// Validates that `R` is orthonormal within 1e-6, `fx, fy > 0`, `h > 0`.
    pub fn new(k: Mat3, r: Mat3, t: [f64; 3], h: f64) -> Result<Self> {
        if !(k[0][0] > 0.0) || !(k[1][1] > 0.0) {
            return Err(Error::Argument("calibration: fx and fy must be > 0".into()));
        }
        if !(h > 0.0) {
            return Err(Error::Argument("calibration: scale h must be > 0".into()));
        }
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|a| r[a][i] * r[a][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - want).abs());
            }
        }
        if !(max_dev <= 1e-6) {
            return Err(Error::Argument(format!(
                "calibration: R not orthonormal (max |R^T R - I| = {max_dev:.3e})"
            )));
        }
        Ok(Self { k, r, t, h })
    }

    /// Identity chain: `K = R = I`, `T = 0`, `h = 1`.
    pub fn identity() -> Self {
        Self::new(IDENTITY3, IDENTITY3, [0.0; 3], 1.0).expect("identity is valid")
    }

    /// Axis-aligned pinhole camera at the origin.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, h: f64) -> Result<Self> {
        Self::new(
            [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            IDENTITY3,
            [0.0; 3],
            h,
        )
    }

    pub fn intrinsics(&self) -> &Mat3 {
        &self.k
    }

    pub fn scale(&self) -> f64 {
        self.h
    }
}

/// KITTI calibration triple. `P2` is the left color camera projection,
/// `R0_rect` the rectifying rotation, `Tr_velo_to_cam` the LiDAR-to-camera
/// transform; projection uses their composite.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiCalibration {
    pub p2: Mat34,
    pub r0_rect: Mat3,
    pub tr_velo_to_cam: Mat34,
}

impl KittiCalibration {
    pub fn new(p2: Mat34, r0_rect: Mat3, tr_velo_to_cam: Mat34) -> Result<Self> {
        let calib = Self {
            p2,
            r0_rect,
            tr_velo_to_cam,
        };
        let m = calib.composite();
        if m.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Format(
                "kitti calibration: composite matrix is not finite".into(),
            ));
        }
        Ok(calib)
    }

    /// `P2 . R0_rect . Tr_velo_to_cam` with the 3x3 / 3x4 factors padded to
    /// homogeneous 4x4 form.
    pub fn composite(&self) -> Mat34 {
        let r0 = pad_rot(&self.r0_rect);
        let tr = pad_affine(&self.tr_velo_to_cam);
        mat34_mul44(&mat34_mul44(&self.p2, &r0), &tr)
    }

    /// Parse the KITTI calib text format: lines of `KEY: v1 v2 ... vn`.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut p2: Option<Vec<f64>> = None;
        let mut r0: Option<Vec<f64>> = None;
        let mut tr: Option<Vec<f64>> = None;
        for line in text.lines() {
            let line = line.trim();
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            let key = key.trim();
            let slot = match key {
                "P2" => &mut p2,
                "R0_rect" => &mut r0,
                "Tr_velo_to_cam" => &mut tr,
                _ => continue,
            };
            let mut vals = Vec::new();
            for tok in rest.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Parse(format!("calib: bad number '{tok}' for {key}")))?;
                vals.push(v);
            }
            *slot = Some(vals);
        }
        let p2 = take_matrix(p2, "P2", 12)?;
        let r0 = take_matrix(r0, "R0_rect", 9)?;
        let tr = take_matrix(tr, "Tr_velo_to_cam", 12)?;
        Self::new(
            [
                [p2[0], p2[1], p2[2], p2[3]],
                [p2[4], p2[5], p2[6], p2[7]],
                [p2[8], p2[9], p2[10], p2[11]],
            ],
            [
                [r0[0], r0[1], r0[2]],
                [r0[3], r0[4], r0[5]],
                [r0[6], r0[7], r0[8]],
            ],
            [
                [tr[0], tr[1], tr[2], tr[3]],
                [tr[4], tr[5], tr[6], tr[7]],
                [tr[8], tr[9], tr[10], tr[11]],
            ],
        )
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse_str(&text)
    }

    /// Serialize back to the calib text format. Values use the shortest
    /// round-trip decimal form, so parse(to_calib_string(c)) == c exactly.
    pub fn to_calib_string(&self) -> String {
        let row = |vals: &[f64]| {
            vals.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let flat34 = |m: &Mat34| m.iter().flatten().copied().collect::<Vec<_>>();
        let flat3 = |m: &Mat3| m.iter().flatten().copied().collect::<Vec<_>>();
        format!(
            "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            row(&flat34(&self.p2)),
            row(&flat3(&self.r0_rect)),
            row(&flat34(&self.tr_velo_to_cam)),
        )
    }
}

fn take_matrix(slot: Option<Vec<f64>>, key: &str, want: usize) -> Result<Vec<f64>> {
    let vals = slot.ok_or_else(|| Error::Parse(format!("calib: missing required key '{key}'")))?;
    if vals.len() != want {
        return Err(Error::Parse(format!(
            "calib: key '{key}' has {} values, expected {want}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn pad_rot(r: &Mat3) -> [[f64; 4]; 4] {
    [
        [r[0][0], r[0][1], r[0][2], 0.0],
        [r[1][0], r[1][1], r[1][2], 0.0],
        [r[2][0], r[2][1], r[2][2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn pad_affine(m: &Mat34) -> [[f64; 4]; 4] {
    [m[0], m[1], m[2], [0.0, 0.0, 0.0, 1.0]]
}

fn mat34_mul44(a: &Mat34, b: &[[f64; 4]; 4]) -> Mat34 {
    let mut out = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Anything that projects LiDAR-frame points to the pixel plane.
pub trait Projector {
    /// 3x4 matrix applied to homogeneous points before perspective division.
    fn projection_matrix(&self) -> Mat34;

    /// Scale applied to (u, v) after perspective division.
    fn pixel_scale(&self) -> f64 {
        1.0
    }
}

impl Projector for CalibrationMatrix {
    fn projection_matrix(&self) -> Mat34 {
        // K [R | T]
        let mut out = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|a| self.k[i][a] * self.r[a][j]).sum();
            }
            out[i][3] = (0..3).map(|a| self.k[i][a] * self.t[a]).sum();
        }
        out
    }

    fn pixel_scale(&self) -> f64 {
        self.h
    }
}

impl Projector for KittiCalibration {
    fn projection_matrix(&self) -> Mat34 {
        self.composite()
    }
}

/// Result of projecting a batch of points. Rows are never dropped: invalid
/// projections keep their slot and are flagged.
#[derive(Clone, Debug)]
pub struct Projection {
    /// Pixel coordinates (u, v) per point, scale applied.
    pub pixels: Vec<[f64; 2]>,
    /// Camera-frame depth z_c per point.
    pub depths: Vec<f64>,
    /// True iff z_c > 0 and the pixel lies in `[0, W) x [0, H)`.
    pub valid: Vec<bool>,
}

/// Project `points` (LiDAR frame, meters) through `proj` onto an image of
/// `image_w` x `image_h` pixels.
pub fn project_points(
    points: &[[f64; 3]],
    proj: &impl Projector,
    image_w: usize,
    image_h: usize,
) -> Projection {
    let m = proj.projection_matrix();
    let h = proj.pixel_scale();
    let mut pixels = Vec::with_capacity(points.len());
    let mut depths = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    let (w, hh) = (image_w as f64, image_h as f64);
    for &p in points {
        let x = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3];
        let y = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3];
        let z = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3];
        let u = h * (x / z);
        let v = h * (y / z);
        pixels.push([u, v]);
        depths.push(z);
        valid.push(z > 0.0 && u >= 0.0 && u < w && v >= 0.0 && v < hh);
    }
    Projection {
        pixels,
        depths,
        valid,
    }
}

/// One recorded point-cloud augmentation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    /// Mirror about the x-z plane (negates y). Self-inverse.
    FlipY,
    /// Rotation about +z by the angle in radians.
    RotateZ(f64),
    /// Uniform scale by a positive factor.
    Scale(f64),
}

impl Augmentation {
    fn apply_one(self, p: [f64; 3]) -> [f64; 3] {
        match self {
            Augmentation::FlipY => [p[0], -p[1], p[2]],
            Augmentation::RotateZ(theta) => {
                let (s, c) = theta.sin_cos();
                [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
            }
            Augmentation::Scale(f) => [p[0] * f, p[1] * f, p[2] * f],
        }
    }

    fn inverse(self) -> Augmentation {
        match self {
            Augmentation::FlipY => Augmentation::FlipY,
            Augmentation::RotateZ(theta) => Augmentation::RotateZ(-theta),
            Augmentation::Scale(f) => Augmentation::Scale(1.0 / f),
        }
    }
}

/// Ordered list of augmentations as they were applied to a point cloud.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentationRecord {
    transforms: Vec<Augmentation>,
}

impl AugmentationRecord {
    pub fn new(transforms: Vec<Augmentation>) -> Result<Self> {
        for t in &transforms {
            if let Augmentation::Scale(f) = t {
                if !(*f > 0.0) {
                    return Err(Error::Argument(format!(
                        "augmentation scale must be > 0, got {f}"
                    )));
                }
            }
            match t {
                Augmentation::RotateZ(a) if !a.is_finite() => {
                    return Err(Error::Argument("augmentation angle must be finite".into()))
                }
                _ => {}
            }
        }
        Ok(Self { transforms })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn transforms(&self) -> &[Augmentation] {
        &self.transforms
    }

    /// Apply the record in order (the forward augmentation).
    pub fn apply(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points
            .iter()
            .map(|&p| self.transforms.iter().fold(p, |q, t| t.apply_one(q)))
            .collect()
    }

    /// Undo the record: inverse of each transform, in reverse order.
    pub fn invert(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points
            .iter()
            .map(|&p| {
                self.transforms
                    .iter()
                    .rev()
                    .fold(p, |q, t| t.inverse().apply_one(q))
            })
            .collect()
    }

    /// Parse the one-op-per-line text form: `flip`, `rotate_z <rad>`,
    /// `scale <factor>`. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut transforms = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let op = toks.next().expect("non-empty line");
            let arg = toks.next();
            if toks.next().is_some() {
                return Err(Error::Parse(format!("augmentation: trailing tokens in '{line}'")));
            }
            let t = match (op, arg) {
                ("flip", None) => Augmentation::FlipY,
                ("rotate_z", Some(a)) => Augmentation::RotateZ(
                    a.parse()
                        .map_err(|_| Error::Parse(format!("augmentation: bad angle '{a}'")))?,
                ),
                ("scale", Some(f)) => Augmentation::Scale(
                    f.parse()
                        .map_err(|_| Error::Parse(format!("augmentation: bad factor '{f}'")))?,
                ),
                _ => return Err(Error::Parse(format!("augmentation: bad line '{line}'"))),
            };
            transforms.push(t);
        }
        Self::new(transforms)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.transforms {
            match t {
                Augmentation::FlipY => out.push_str("flip\n"),
                Augmentation::RotateZ(a) => out.push_str(&format!("rotate_z {a}\n")),
                Augmentation::Scale(f) => out.push_str(&format!("scale {f}\n")),
            }
        }
        out
    }
}

/// Decode packed little-endian `(x, y, z, reflectance)` f32 records.
pub fn points_from_bin_bytes(bytes: &[u8]) -> Result<Vec<[f32; 4]>> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "velodyne bin: length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
            [f(0), f(4), f(8), f(12)]
        })
        .collect())
}

/// Encode points as packed little-endian f32 records.
pub fn points_to_bin_bytes(points: &[[f32; 4]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_velodyne_bin(path: impl AsRef<Path>) -> Result<Vec<[f32; 4]>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    points_from_bin_bytes(&bytes)
}

pub fn write_velodyne_bin(points: &[[f32; 4]], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), points_to_bin_bytes(points)).map_err(|e| Error::io(path.as_ref(), e))
}
