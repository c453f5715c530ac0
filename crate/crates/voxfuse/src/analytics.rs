//! Sparsity statistics that motivate patch-level fusion: how few image
//! pixels actually receive a projected LiDAR point, and how few points fall
//! inside annotated boxes, broken down by detection difficulty.

use crate::calib::{project_points, Projector};
use crate::error::{Error, Result};

/// KITTI-style detection difficulty. Labels are input metadata (from
/// annotations or, for synthetic scenes, a range-based proxy); never
/// recomputed here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "moderate" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Parse(format!("unknown difficulty '{other}'"))),
        }
    }
}

/// Oriented 3D box: center, full extents, and yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl OrientedBox {
    /// Point containment: rotate into the box frame by `-yaw` about the
    /// center, then test the half-open extents `[-size/2, size/2)`.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let (s, c) = (-self.yaw).sin_cos();
        let lx = c * dx - s * dy;
        let ly = s * dx + c * dy;
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        lx >= -half[0]
            && lx < half[0]
            && ly >= -half[1]
            && ly < half[1]
            && dz >= -half[2]
            && dz < half[2]
    }
}

/// Distance bands used in occupancy breakdowns: 0-20 m, 20-40 m, 40 m+.
pub const DISTANCE_BINS: [&str; 3] = ["0_20m", "20_40m", "40m_inf"];

fn distance_bin(range: f64) -> usize {
    if range < 20.0 {
        0
    } else if range < 40.0 {
        1
    } else {
        2
    }
}

/// Pixel occupancy of a projected point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyReport {
    pub image_width: usize,
    pub image_height: usize,
    pub total_pixels: usize,
    /// Pixels receiving at least one valid projection.
    pub hit_pixels: usize,
    /// Pixels hit by at least one point from each distance band (a pixel
    /// can count in several bands).
    pub bin_hit_pixels: [usize; 3],
    /// Valid projected points per distance band.
    pub bin_points: [usize; 3],
}

impl OccupancyReport {
    pub fn occupancy_rate(&self) -> f64 {
        self.hit_pixels as f64 / self.total_pixels as f64
    }

    /// `key: value` lines for reports.
    pub fn to_kv_lines(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("image_width: {}\n", self.image_width));
        out.push_str(&format!("image_height: {}\n", self.image_height));
        out.push_str(&format!("total_pixels: {}\n", self.total_pixels));
        out.push_str(&format!("hit_pixels: {}\n", self.hit_pixels));
        out.push_str(&format!("occupancy_rate: {:.6}\n", self.occupancy_rate()));
        for (b, name) in DISTANCE_BINS.iter().enumerate() {
            out.push_str(&format!("bin_{name}_points: {}\n", self.bin_points[b]));
            out.push_str(&format!(
                "bin_{name}_hit_pixels: {}\n",
                self.bin_hit_pixels[b]
            ));
            out.push_str(&format!(
                "bin_{name}_occupancy_rate: {:.6}\n",
                self.bin_hit_pixels[b] as f64 / self.total_pixels as f64
            ));
        }
        out
    }
}

/// Project points and count hit pixels. A pixel is hit iff at least one
/// valid projection floors into it; the distance band of a hit is the
/// Euclidean range of its source point.
pub fn occupancy(
    points: &[[f64; 3]],
    proj: &impl Projector,
    image_w: usize,
    image_h: usize,
) -> Result<OccupancyReport> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::Argument("occupancy: image extents must be >= 1".into()));
    }
    let projection = project_points(points, proj, image_w, image_h);
    let mut hit = vec![false; image_w * image_h];
    let mut bin_hit = vec![[false; 3]; image_w * image_h];
    let mut bin_points = [0usize; 3];
    for (i, &ok) in projection.valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let [u, v] = projection.pixels[i];
        let (px, py) = (u.floor() as usize, v.floor() as usize);
        let at = px * image_h + py;
        hit[at] = true;
        let p = points[i];
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let b = distance_bin(range);
        bin_points[b] += 1;
        bin_hit[at][b] = true;
    }
    let mut bin_hit_pixels = [0usize; 3];
    for flags in &bin_hit {
        for b in 0..3 {
            if flags[b] {
                bin_hit_pixels[b] += 1;
            }
        }
    }
    Ok(OccupancyReport {
        image_width: image_w,
        image_height: image_h,
        total_pixels: image_w * image_h,
        hit_pixels: hit.iter().filter(|&&h| h).count(),
        bin_hit_pixels,
        bin_points,
    })
}

/// Per-box point counts with difficulty labels.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPointHistogram {
    pub counts: Vec<usize>,
    pub difficulties: Vec<Difficulty>,
}

impl BoxPointHistogram {
    /// Fraction of boxes (optionally restricted to one difficulty) holding
    /// fewer than `threshold` points. Zero matching boxes yield 0.
    pub fn fraction_below(&self, threshold: usize, difficulty: Option<Difficulty>) -> f64 {
        let mut total = 0usize;
        let mut below = 0usize;
        for (i, &count) in self.counts.iter().enumerate() {
            if difficulty.is_some_and(|d| d != self.difficulties[i]) {
                continue;
            }
            total += 1;
            if count < threshold {
                below += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            below as f64 / total as f64
        }
    }

    /// `box_id,difficulty,point_count` CSV rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("box_id,difficulty,point_count\n");
        for (i, &count) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i, self.difficulties[i].as_str(), count));
        }
        out
    }
}

/// Count the points inside each oriented box.
pub fn box_point_counts(
    points: &[[f64; 3]],
    boxes: &[OrientedBox],
    difficulties: &[Difficulty],
) -> Result<BoxPointHistogram> {
    if boxes.len() != difficulties.len() {
        return Err(Error::Argument(format!(
            "{} boxes but {} difficulty labels",
            boxes.len(),
            difficulties.len()
        )));
    }
    for b in boxes {
        if b.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Argument("box sizes must be positive".into()));
        }
    }
    let mut counts = vec![0usize; boxes.len()];
    for &p in points {
        for (i, b) in boxes.iter().enumerate() {
            if b.contains(p) {
                counts[i] += 1;
            }
        }
    }
    Ok(BoxPointHistogram {
        counts,
        difficulties: difficulties.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::CalibrationMatrix;
    use crate::rng::Xoshiro256StarStar;
    use std::collections::HashSet;

    fn camera() -> CalibrationMatrix {
        // z forward, 64x48 image
        CalibrationMatrix::pinhole(40.0, 40.0, 32.0, 24.0, 1.0).unwrap()
    }

    #[test]
    fn zero_points_zero_rate() {
        let r = occupancy(&[], &camera(), 64, 48).unwrap();
        assert_eq!(r.hit_pixels, 0);
        assert_eq!(r.occupancy_rate(), 0.0);
        assert_eq!(r.total_pixels, 64 * 48);
    }

    #[test]
    fn single_point_hits_one_pixel() {
        let r = occupancy(&[[0.1, 0.1, 5.0]], &camera(), 64, 48).unwrap();
        assert_eq!(r.hit_pixels, 1);
        assert_eq!(r.bin_points, [1, 0, 0]);
        assert_eq!(r.bin_hit_pixels, [1, 0, 0]);
    }

    #[test]
    fn behind_camera_points_do_not_hit() {
        let r = occupancy(&[[0.0, 0.0, -5.0]], &camera(), 64, 48).unwrap();
        assert_eq!(r.hit_pixels, 0);
    }

    #[test]
    fn occupancy_matches_pixel_set_oracle() {
        let cam = camera();
        let mut rng = Xoshiro256StarStar::seeded(314);
        let points: Vec<[f64; 3]> = (0..5000)
            .map(|_| {
                let z = rng.uniform(1.0, 80.0);
                [
                    rng.uniform(-0.8, 0.8) * z,
                    rng.uniform(-0.6, 0.6) * z,
                    z,
                ]
            })
            .collect();
        let r = occupancy(&points, &cam, 64, 48).unwrap();

        // independent marking: recompute the projection arithmetic directly
        let mut marked: HashSet<(usize, usize)> = HashSet::new();
        let mut bins: [HashSet<(usize, usize)>; 3] = Default::default();
        for p in &points {
            if p[2] <= 0.0 {
                continue;
            }
            let u = 40.0 * p[0] / p[2] + 32.0;
            let v = 40.0 * p[1] / p[2] + 24.0;
            if !(0.0..64.0).contains(&u) || !(0.0..48.0).contains(&v) {
                continue;
            }
            let px = (u.floor() as usize, v.floor() as usize);
            marked.insert(px);
            let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            bins[if range < 20.0 {
                0
            } else if range < 40.0 {
                1
            } else {
                2
            }]
            .insert(px);
        }
        assert_eq!(r.hit_pixels, marked.len());
        for b in 0..3 {
            assert_eq!(r.bin_hit_pixels[b], bins[b].len());
        }
        assert!(r.hit_pixels > 0);
        assert!(r.hit_pixels < r.total_pixels);
    }

    #[test]
    fn occupancy_is_permutation_invariant() {
        let cam = camera();
        let mut rng = Xoshiro256StarStar::seeded(17);
        let mut points: Vec<[f64; 3]> = (0..800)
            .map(|_| {
                let z = rng.uniform(1.0, 70.0);
                [rng.uniform(-0.7, 0.7) * z, rng.uniform(-0.5, 0.5) * z, z]
            })
            .collect();
        let a = occupancy(&points, &cam, 64, 48).unwrap();
        for i in (1..points.len()).rev() {
            points.swap(i, rng.below(i + 1));
        }
        let b = occupancy(&points, &cam, 64, 48).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adding_points_never_decreases_hits() {
        let cam = camera();
        let mut rng = Xoshiro256StarStar::seeded(42);
        let mut points: Vec<[f64; 3]> = Vec::new();
        let mut prev = 0;
        for _ in 0..20 {
            for _ in 0..50 {
                let z = rng.uniform(1.0, 60.0);
                points.push([rng.uniform(-0.7, 0.7) * z, rng.uniform(-0.5, 0.5) * z, z]);
            }
            let r = occupancy(&points, &cam, 64, 48).unwrap();
            assert!(r.hit_pixels >= prev);
            prev = r.hit_pixels;
        }
    }

    #[test]
    fn unit_box_contains_origin() {
        let b = OrientedBox {
            center: [0.0; 3],
            size: [1.0; 3],
            yaw: 0.0,
        };
        assert!(b.contains([0.0, 0.0, 0.0]));
        assert!(b.contains([-0.5, -0.5, -0.5])); // lower corner inclusive
        assert!(!b.contains([0.5, 0.0, 0.0])); // upper face exclusive
    }

    #[test]
    fn quarter_turn_swaps_local_extents() {
        let b = OrientedBox {
            center: [0.0; 3],
            size: [4.0, 1.0, 1.0],
            yaw: std::f64::consts::FRAC_PI_2,
        };
        // the long axis now points along world y
        assert!(b.contains([0.0, 1.5, 0.0]));
        assert!(!b.contains([1.5, 0.0, 0.0]));
    }

    #[test]
    fn counts_match_containment_oracle() {
        let mut rng = Xoshiro256StarStar::seeded(2718);
        let boxes: Vec<OrientedBox> = (0..10)
            .map(|_| OrientedBox {
                center: [
                    rng.uniform(-20.0, 20.0),
                    rng.uniform(-20.0, 20.0),
                    rng.uniform(-2.0, 2.0),
                ],
                size: [
                    rng.uniform(1.0, 5.0),
                    rng.uniform(1.0, 3.0),
                    rng.uniform(1.0, 2.0),
                ],
                yaw: rng.uniform(0.0, std::f64::consts::TAU),
            })
            .collect();
        let difficulties: Vec<Difficulty> = (0..10)
            .map(|i| match i % 3 {
                0 => Difficulty::Easy,
                1 => Difficulty::Moderate,
                _ => Difficulty::Hard,
            })
            .collect();
        let points: Vec<[f64; 3]> = (0..4000)
            .map(|_| {
                [
                    rng.uniform(-25.0, 25.0),
                    rng.uniform(-25.0, 25.0),
                    rng.uniform(-3.0, 3.0),
                ]
            })
            .collect();
        let hist = box_point_counts(&points, &boxes, &difficulties).unwrap();

        // brute force per-point rotation written out independently
        for (i, b) in boxes.iter().enumerate() {
            let mut want = 0;
            for p in &points {
                let dx = p[0] - b.center[0];
                let dy = p[1] - b.center[1];
                let c = b.yaw.cos();
                let s = b.yaw.sin();
                // inverse rotation: R(-yaw) . d
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                let lz = p[2] - b.center[2];
                if lx >= -b.size[0] / 2.0
                    && lx < b.size[0] / 2.0
                    && ly >= -b.size[1] / 2.0
                    && ly < b.size[1] / 2.0
                    && lz >= -b.size[2] / 2.0
                    && lz < b.size[2] / 2.0
                {
                    want += 1;
                }
            }
            assert_eq!(hist.counts[i], want, "box {i}");
        }
        assert!(hist.counts.iter().sum::<usize>() > 0);
    }

    #[test]
    fn cumulative_fraction_monotone_in_threshold() {
        let hist = BoxPointHistogram {
            counts: vec![5, 50, 200, 10, 80, 300],
            difficulties: vec![
                Difficulty::Easy,
                Difficulty::Easy,
                Difficulty::Moderate,
                Difficulty::Hard,
                Difficulty::Hard,
                Difficulty::Hard,
            ],
        };
        let mut prev = 0.0;
        for thr in [0usize, 10, 60, 100, 250, 500] {
            let f = hist.fraction_below(thr, None);
            assert!(f >= prev);
            assert!((0.0..=1.0).contains(&f));
            prev = f;
        }
        assert_eq!(hist.fraction_below(100, Some(Difficulty::Hard)), 2.0 / 3.0);
        assert_eq!(hist.fraction_below(100, Some(Difficulty::Moderate)), 0.0);
        // no boxes of a difficulty -> 0 by definition
        let empty = BoxPointHistogram {
            counts: vec![],
            difficulties: vec![],
        };
        assert_eq!(empty.fraction_below(10, None), 0.0);
    }

    #[test]
    fn mismatched_difficulty_length_rejected() {
        let b = OrientedBox {
            center: [0.0; 3],
            size: [1.0; 3],
            yaw: 0.0,
        };
        assert!(box_point_counts(&[], &[b], &[]).is_err());
        let bad = OrientedBox {
            center: [0.0; 3],
            size: [0.0, 1.0, 1.0],
            yaw: 0.0,
        };
        assert!(box_point_counts(&[], &[bad], &[Difficulty::Easy]).is_err());
    }
}
