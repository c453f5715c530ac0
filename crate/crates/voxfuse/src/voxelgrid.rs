//! Sparse voxel tensors over a configured grid.
//!
//! A [`VoxelGridSpec`] fixes the voxel size, the covered axis-aligned range,
//! and the stage stride. A [`SparseVoxelTensor`] stores the N non-empty
//! voxels as sorted unique index triples plus an N x C feature matrix.
//!
//! Index-to-world uses the corner convention: `world = (index * stride) *
//! voxel_size + range_min`, with no half-voxel offset. Most frameworks use
//! voxel centers instead; set [`VoxelGridSpec::center_offset`] to get the
//! `+0.5` variant for cross-checking.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{read_npy, write_npy, Tensor};

/// Grid geometry: voxel size, covered range, and stage stride.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGridSpec {
    pub voxel_size: [f64; 3],
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub stride: u32,
    /// Use voxel centers (`+0.5` voxel) instead of corners in
    /// `index_to_world`. Off by default.
    pub center_offset: bool,
}

impl VoxelGridSpec {
    pub fn new(
        voxel_size: [f64; 3],
        range_min: [f64; 3],
        range_max: [f64; 3],
        stride: u32,
    ) -> Result<Self> {
        let spec = Self {
            voxel_size,
            range_min,
            range_max,
            stride,
            center_offset: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.voxel_size[a] > 0.0) || !self.voxel_size[a].is_finite() {
                return Err(Error::Argument("voxel size components must be > 0".into()));
            }
            if !(self.range_max[a] > self.range_min[a])
                || !self.range_min[a].is_finite()
                || !self.range_max[a].is_finite()
            {
                return Err(Error::Argument("range max must exceed range min".into()));
            }
        }
        if self.stride == 0 {
            return Err(Error::Argument("stride must be >= 1".into()));
        }
        let ext = self.extents();
        for (a, &e) in ext.iter().enumerate() {
            if e < 1 {
                return Err(Error::Argument(format!("grid extent on axis {a} is zero")));
            }
            if e > u32::MAX as usize {
                return Err(Error::Argument(format!("grid extent on axis {a} too large")));
            }
        }
        Ok(())
    }

    /// Base-grid extents: `floor((max - min) / voxel_size)` per axis.
    pub fn extents(&self) -> [usize; 3] {
        let mut e = [0usize; 3];
        for a in 0..3 {
            let span = (self.range_max[a] - self.range_min[a]) / self.voxel_size[a];
            e[a] = if span.is_finite() && span > 0.0 {
                span.floor().min(u32::MAX as f64) as usize
            } else {
                0
            };
        }
        e
    }

    /// Valid index range at this stride: index `i` is in-grid iff
    /// `i * stride < extent`, i.e. `i < ceil(extent / stride)`.
    pub fn strided_extents(&self) -> [usize; 3] {
        let ext = self.extents();
        let s = self.stride as usize;
        [ext[0].div_ceil(s), ext[1].div_ceil(s), ext[2].div_ceil(s)]
    }

    /// Strided voxel index containing a world point, or None if the point
    /// falls outside the covered grid. Boundary points take the voxel whose
    /// lower corner they sit on (floor semantics). A small guard absorbs
    /// the rounding left over from reconstructing corner positions in
    /// floating point, so `world_to_index(index_to_world(i)) == i`.
    pub fn world_to_index(&self, p: [f64; 3]) -> Option<[u32; 3]> {
        const INDEX_GUARD: f64 = 1e-9;
        let ext = self.extents();
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let t = (p[a] - self.range_min[a]) / self.voxel_size[a];
            if !t.is_finite() {
                return None;
            }
            let base = (t + INDEX_GUARD).floor();
            if base < 0.0 || base >= ext[a] as f64 {
                return None;
            }
            idx[a] = (base as u64 / self.stride as u64) as u32;
        }
        Some(idx)
    }

    /// World position of a strided index: `(index * stride) * voxel_size +
    /// range_min` (corner convention), plus half a strided voxel when
    /// `center_offset` is set.
    pub fn index_to_world(&self, idx: [u32; 3]) -> [f64; 3] {
        let off = if self.center_offset { 0.5 } else { 0.0 };
        let mut w = [0.0; 3];
        for a in 0..3 {
            let s_i = idx[a] as f64 * self.stride as f64;
            w[a] = (s_i + off * self.stride as f64) * self.voxel_size[a] + self.range_min[a];
        }
        w
    }

    /// One-line text form used as the sidecar next to serialized tensors.
    pub fn sidecar_line(&self, channels: usize, count: usize) -> String {
        format!(
            "voxel_size={},{},{} range_min={},{},{} range_max={},{},{} stride={} center_offset={} channels={} count={}",
            self.voxel_size[0], self.voxel_size[1], self.voxel_size[2],
            self.range_min[0], self.range_min[1], self.range_min[2],
            self.range_max[0], self.range_max[1], self.range_max[2],
            self.stride, self.center_offset, channels, count,
        )
    }

    /// Parse the sidecar line; returns the spec plus (channels, count).
    pub fn parse_sidecar_line(line: &str) -> Result<(Self, usize, usize)> {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("sidecar: expected key=value, got '{tok}'")))?;
            fields.insert(k, v);
        }
        let vec3 = |key: &str| -> Result<[f64; 3]> {
            let raw = fields
                .get(key)
                .ok_or_else(|| Error::Parse(format!("sidecar: missing '{key}'")))?;
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!("sidecar: '{key}' wants 3 components")));
            }
            let mut out = [0.0; 3];
            for (a, p) in parts.iter().enumerate() {
                out[a] = p
                    .parse()
                    .map_err(|_| Error::Parse(format!("sidecar: bad number '{p}' in '{key}'")))?;
            }
            Ok(out)
        };
        let scalar = |key: &str| -> Result<&str> {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::Parse(format!("sidecar: missing '{key}'")))
        };
        let mut spec = VoxelGridSpec::new(
            vec3("voxel_size")?,
            vec3("range_min")?,
            vec3("range_max")?,
            scalar("stride")?
                .parse()
                .map_err(|_| Error::Parse("sidecar: bad stride".into()))?,
        )?;
        spec.center_offset = match scalar("center_offset")? {
            "true" => true,
            "false" => false,
            other => return Err(Error::Parse(format!("sidecar: bad center_offset '{other}'"))),
        };
        let channels = scalar("channels")?
            .parse()
            .map_err(|_| Error::Parse("sidecar: bad channels".into()))?;
        let count = scalar("count")?
            .parse()
            .map_err(|_| Error::Parse("sidecar: bad count".into()))?;
        Ok((spec, channels, count))
    }
}

/// N non-empty voxels: sorted unique index triples plus N x C features.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelTensor {
    spec: VoxelGridSpec,
    indices: Vec<[u32; 3]>,
    features: Vec<f64>,
    channels: usize,
}

impl SparseVoxelTensor {
    /// Build from rows. Rows are sorted lexicographically by index;
    /// duplicate indices or out-of-grid indices are rejected.
    pub fn new(
        spec: VoxelGridSpec,
        indices: Vec<[u32; 3]>,
        features: Vec<f64>,
        channels: usize,
    ) -> Result<Self> {
        spec.validate()?;
        let n = indices.len();
        if features.len() != n * channels {
            return Err(Error::Argument(format!(
                "features length {} != {} rows x {} channels",
                features.len(),
                n,
                channels
            )));
        }
        let ext = spec.strided_extents();
        for idx in &indices {
            for a in 0..3 {
                if idx[a] as usize >= ext[a] {
                    return Err(Error::Argument(format!(
                        "voxel index {:?} outside strided extents {:?}",
                        idx, ext
                    )));
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| indices[i]);
        for w in order.windows(2) {
            if indices[w[0]] == indices[w[1]] {
                return Err(Error::Argument(format!(
                    "duplicate voxel index {:?}",
                    indices[w[0]]
                )));
            }
        }
        let sorted_indices: Vec<[u32; 3]> = order.iter().map(|&i| indices[i]).collect();
        let mut sorted_features = vec![0.0; features.len()];
        for (dst, &src) in order.iter().enumerate() {
            sorted_features[dst * channels..(dst + 1) * channels]
                .copy_from_slice(&features[src * channels..(src + 1) * channels]);
        }
        Ok(Self {
            spec,
            indices: sorted_indices,
            features: sorted_features,
            channels,
        })
    }

    pub fn empty(spec: VoxelGridSpec, channels: usize) -> Result<Self> {
        Self::new(spec, Vec::new(), Vec::new(), channels)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn indices(&self) -> &[[u32; 3]] {
        &self.indices
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, row: usize) -> &[f64] {
        &self.features[row * self.channels..(row + 1) * self.channels]
    }

    /// Row id of an index triple, if present. Binary search over the sorted
    /// index list; deterministic.
    pub fn lookup(&self, index: [u32; 3]) -> Option<usize> {
        self.indices.binary_search(&index).ok()
    }

    /// World positions of all voxels (corner convention; see
    /// [`VoxelGridSpec::index_to_world`]).
    pub fn indices_to_world(&self) -> Vec<[f64; 3]> {
        self.indices
            .iter()
            .map(|&i| self.spec.index_to_world(i))
            .collect()
    }

    /// Same indices and grid, new feature matrix.
    pub fn with_features(&self, features: Vec<f64>, channels: usize) -> Result<Self> {
        if features.len() != self.len() * channels {
            return Err(Error::Argument(format!(
                "features length {} != {} rows x {} channels",
                features.len(),
                self.len(),
                channels
            )));
        }
        Ok(Self {
            spec: self.spec.clone(),
            indices: self.indices.clone(),
            features,
            channels,
        })
    }

    /// Write `<stem>.idx.npy` (N x 3 as f64), `<stem>.feat.npy` (N x C as
    /// f32), and `<stem>.spec.txt` (sidecar line). The NPY files are
    /// omitted when the tensor is empty; the sidecar carries the count.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let sidecar = self.spec.sidecar_line(self.channels, self.len());
        fs::write(sidecar_path(stem), sidecar + "\n")
            .map_err(|e| Error::io(sidecar_path(stem), e))?;
        if self.is_empty() {
            return Ok(());
        }
        let idx_data: Vec<f64> = self
            .indices
            .iter()
            .flat_map(|i| i.iter().map(|&x| x as f64))
            .collect();
        let idx = Tensor::from_f64(vec![self.len(), 3], idx_data)?;
        write_npy(&idx, idx_path(stem))?;
        let feat_data: Vec<f32> = self.features.iter().map(|&x| x as f32).collect();
        let feat = Tensor::from_f32(vec![self.len(), self.channels.max(1)], feat_data)?;
        write_npy(&feat, feat_path(stem))?;
        Ok(())
    }

    /// Load a tensor written by [`save`](Self::save).
    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let text = fs::read_to_string(sidecar_path(stem))
            .map_err(|e| Error::io(sidecar_path(stem), e))?;
        let line = text.lines().next().unwrap_or("");
        let (spec, channels, count) = VoxelGridSpec::parse_sidecar_line(line)?;
        if count == 0 {
            return Self::new(spec, Vec::new(), Vec::new(), channels);
        }
        let idx = read_npy(idx_path(stem))?;
        if idx.shape() != [count, 3] {
            return Err(Error::Format(format!(
                "sparse tensor: index file shape {:?}, sidecar says ({count}, 3)",
                idx.shape()
            )));
        }
        let ext = spec.strided_extents();
        let mut indices = Vec::with_capacity(count);
        for r in 0..count {
            let mut triple = [0u32; 3];
            for a in 0..3 {
                let v = idx.get(&[r, a]);
                if v.fract() != 0.0 || v < 0.0 || v >= ext[a] as f64 {
                    return Err(Error::Format(format!(
                        "sparse tensor: bad index value {v} at row {r}"
                    )));
                }
                triple[a] = v as u32;
            }
            indices.push(triple);
        }
        let feat = read_npy(feat_path(stem))?;
        if feat.shape() != [count, channels.max(1)] {
            return Err(Error::Format(format!(
                "sparse tensor: feature file shape {:?}, sidecar says ({count}, {channels})",
                feat.shape()
            )));
        }
        let features = if channels == 0 {
            Vec::new()
        } else {
            feat.to_f64_vec()
        };
        Self::new(spec, indices, features, channels)
    }
}

fn sidecar_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".spec.txt")
}

fn idx_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".idx.npy")
}

fn feat_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".feat.npy")
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Voxelize a point cloud. `points` is a flat row-major M x dim buffer with
/// `dim >= 3`; columns past xyz are the per-point attributes. Each occupied
/// voxel's feature is the mean of the attributes of its first
/// `max_points_per_voxel` points in input order. Out-of-range points are
/// discarded; zero in-range points yield an empty tensor.
pub fn voxelize(
    points: &[f64],
    dim: usize,
    spec: &VoxelGridSpec,
    max_points_per_voxel: usize,
) -> Result<SparseVoxelTensor> {
    if dim < 3 {
        return Err(Error::Argument("voxelize: point dim must be >= 3".into()));
    }
    if points.len() % dim != 0 {
        return Err(Error::Argument(format!(
            "voxelize: buffer length {} not a multiple of dim {dim}",
            points.len()
        )));
    }
    if max_points_per_voxel == 0 {
        return Err(Error::Argument(
            "voxelize: max_points_per_voxel must be >= 1".into(),
        ));
    }
    spec.validate()?;
    let channels = dim - 3;

    struct Acc {
        used: usize,
        sum: Vec<f64>,
    }
    let mut cells: HashMap<[u32; 3], Acc> = HashMap::new();
    for row in points.chunks_exact(dim) {
        let Some(idx) = spec.world_to_index([row[0], row[1], row[2]]) else {
            continue;
        };
        let acc = cells.entry(idx).or_insert_with(|| Acc {
            used: 0,
            sum: vec![0.0; channels],
        });
        if acc.used < max_points_per_voxel {
            for (c, &v) in row[3..].iter().enumerate() {
                acc.sum[c] += v;
            }
            acc.used += 1;
        }
    }

    let mut rows: Vec<([u32; 3], Vec<f64>)> = cells
        .into_iter()
        .map(|(idx, acc)| {
            let mean = acc.sum.iter().map(|&s| s / acc.used as f64).collect();
            (idx, mean)
        })
        .collect();
    rows.sort_by_key(|(idx, _)| *idx);

    let indices: Vec<[u32; 3]> = rows.iter().map(|(i, _)| *i).collect();
    let mut features = Vec::with_capacity(indices.len() * channels);
    for (_, mean) in rows {
        features.extend_from_slice(&mean);
    }
    SparseVoxelTensor::new(spec.clone(), indices, features, channels)
}

/// The `k_s^3 - 1` integer offsets of a cubic neighborhood, excluding the
/// center, in lexicographic order. `k_s` must be odd.
pub fn neighbor_offsets(k_s: usize) -> Result<Vec<[i32; 3]>> {
    Ok(cube_offsets(k_s)?
        .into_iter()
        .filter(|&o| o != [0, 0, 0])
        .collect())
}

/// All `k_s^3` offsets of a cubic kernel including the center, in
/// lexicographic order. `k_s` must be odd.
pub fn cube_offsets(k_s: usize) -> Result<Vec<[i32; 3]>> {
    if k_s == 0 || k_s % 2 == 0 {
        return Err(Error::Argument(format!(
            "kernel size must be odd and >= 1, got {k_s}"
        )));
    }
    let r = (k_s / 2) as i32;
    let mut out = Vec::with_capacity(k_s * k_s * k_s);
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256StarStar;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn kitti_spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.05, 0.05, 0.1], [0.0, -40.0, -3.0], [70.4, 40.0, 1.0], 1).unwrap()
    }

    #[test]
    fn extents_of_default_grid() {
        assert_eq!(kitti_spec().extents(), [1408, 1600, 40]);
    }

    #[test]
    fn origin_index_maps_to_range_min() {
        let spec = kitti_spec();
        assert_eq!(spec.index_to_world([0, 0, 0]), [0.0, -40.0, -3.0]);
    }

    #[test]
    fn hand_evaluated_strided_world_position() {
        // index (2,1,3), stride 2, size (0.05,0.05,0.1), min (0,-40,-3)
        // -> (0.2, -39.9, -2.4)
        let mut spec = kitti_spec();
        spec.stride = 2;
        let w = spec.index_to_world([2, 1, 3]);
        assert!((w[0] - 0.2).abs() < 1e-12);
        assert!((w[1] - -39.9).abs() < 1e-12);
        assert!((w[2] - -2.4).abs() < 1e-12);
    }

    #[test]
    fn center_offset_adds_half_voxel() {
        let mut spec = kitti_spec();
        spec.center_offset = true;
        let w = spec.index_to_world([0, 0, 0]);
        assert!((w[0] - 0.025).abs() < 1e-12);
        assert!((w[1] - -39.975).abs() < 1e-12);
        assert!((w[2] - -2.95).abs() < 1e-12);
    }

    #[test]
    fn world_index_roundtrip_on_exact_corners() {
        let spec = kitti_spec();
        for idx in [[0u32, 0, 0], [1, 1, 1], [703, 800, 20], [1407, 1599, 39]] {
            let w = spec.index_to_world(idx);
            assert_eq!(spec.world_to_index(w), Some(idx), "index {idx:?}");
        }
    }

    #[test]
    fn indices_to_world_is_affine() {
        let mut spec = kitti_spec();
        spec.stride = 2;
        let a = [5u32, 7, 3];
        let b = [2u32, 1, 0];
        let wa = spec.index_to_world(a);
        let wb = spec.index_to_world(b);
        for ax in 0..3 {
            let want = (a[ax] as f64 - b[ax] as f64) * spec.stride as f64 * spec.voxel_size[ax];
            assert!((wa[ax] - wb[ax] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_points_rejected() {
        let spec = kitti_spec();
        assert_eq!(spec.world_to_index([-0.01, 0.0, 0.0]), None);
        assert_eq!(spec.world_to_index([70.4, 0.0, 0.0]), None); // == max
        assert_eq!(spec.world_to_index([0.0, 0.0, 1.0]), None);
        assert!(spec.world_to_index([70.39, 39.99, 0.99]).is_some());
        assert_eq!(spec.world_to_index([f64::NAN, 0.0, 0.0]), None);
    }

    #[test]
    fn single_point_at_min_corner() {
        let spec = kitti_spec();
        let t = voxelize(&[0.0, -40.0, -3.0, 0.7], 4, &spec, 5).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.indices()[0], [0, 0, 0]);
        assert_eq!(t.feature(0), &[0.7]);
    }

    #[test]
    fn two_points_same_voxel_mean() {
        let spec = kitti_spec();
        let pts = [0.01, 0.0, 0.0, 0.2, 0.02, 0.01, 0.05, 0.6];
        let t = voxelize(&pts, 4, &spec, 5).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t.feature(0)[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn max_points_truncates_to_earliest() {
        let spec = kitti_spec();
        // three points in one voxel, attributes 1, 2, 100; cap at 2
        let pts = [
            0.01, 0.0, 0.0, 1.0, //
            0.02, 0.0, 0.0, 2.0, //
            0.03, 0.0, 0.0, 100.0,
        ];
        let t = voxelize(&pts, 4, &spec, 2).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t.feature(0)[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zero_in_range_points_is_empty_not_error() {
        let spec = kitti_spec();
        let t = voxelize(&[-5.0, 0.0, 0.0, 1.0], 4, &spec, 5).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn voxelize_matches_hashmap_bruteforce_oracle() {
        let spec = kitti_spec();
        let mut rng = Xoshiro256StarStar::seeded(2024);
        let n = 10_000;
        let mut pts = Vec::with_capacity(n * 4);
        for _ in 0..n {
            pts.push(rng.uniform(-5.0, 75.0));
            pts.push(rng.uniform(-45.0, 45.0));
            pts.push(rng.uniform(-3.5, 1.5));
            pts.push(rng.uniform(0.0, 1.0));
        }
        let max_pts = 3;
        let t = voxelize(&pts, 4, &spec, max_pts).unwrap();

        // brute force: independent floor arithmetic + mean
        let mut oracle: HashMap<[u32; 3], (usize, f64)> = HashMap::new();
        let ext = spec.extents();
        for row in pts.chunks_exact(4) {
            let mut ok = true;
            let mut idx = [0u32; 3];
            for a in 0..3 {
                let t = (row[a] - spec.range_min[a]) / spec.voxel_size[a];
                if t < 0.0 || t.floor() >= ext[a] as f64 {
                    ok = false;
                    break;
                }
                idx[a] = t.floor() as u32;
            }
            if !ok {
                continue;
            }
            let e = oracle.entry(idx).or_insert((0, 0.0));
            if e.0 < max_pts {
                e.1 += row[3];
                e.0 += 1;
            }
        }
        assert_eq!(t.len(), oracle.len());
        for (row, idx) in t.indices().iter().enumerate() {
            let (used, sum) = oracle.get(idx).expect("index present in oracle");
            let want = sum / *used as f64;
            assert!((t.feature(row)[0] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn lookup_exhaustive_membership() {
        let spec = kitti_spec();
        let mut rng = Xoshiro256StarStar::seeded(9);
        let mut pts = Vec::new();
        for _ in 0..2000 {
            pts.extend_from_slice(&[
                rng.uniform(0.0, 70.0),
                rng.uniform(-40.0, 40.0),
                rng.uniform(-3.0, 1.0),
                1.0,
            ]);
        }
        let t = voxelize(&pts, 4, &spec, 5).unwrap();
        let present: HashSet<[u32; 3]> = t.indices().iter().copied().collect();
        for (row, idx) in t.indices().iter().enumerate() {
            assert_eq!(t.lookup(*idx), Some(row));
        }
        let ext = t.spec().strided_extents();
        let mut misses = 0;
        while misses < t.len() {
            let cand = [
                rng.below(ext[0]) as u32,
                rng.below(ext[1]) as u32,
                rng.below(ext[2]) as u32,
            ];
            if present.contains(&cand) {
                continue;
            }
            assert_eq!(t.lookup(cand), None);
            misses += 1;
        }
    }

    #[test]
    fn neighbor_offsets_counts() {
        assert!(neighbor_offsets(1).unwrap().is_empty());
        assert_eq!(neighbor_offsets(3).unwrap().len(), 26);
        assert_eq!(neighbor_offsets(5).unwrap().len(), 124);
        assert!(neighbor_offsets(2).is_err());
        assert!(neighbor_offsets(0).is_err());
    }

    #[test]
    fn neighbor_offsets_match_bruteforce_cube() {
        for k in [1usize, 3, 5, 7] {
            let list = neighbor_offsets(k).unwrap();
            let got: HashSet<[i32; 3]> = list.iter().copied().collect();
            assert_eq!(got.len(), list.len(), "duplicates at k = {k}");
            let r = (k / 2) as i32;
            let mut want = HashSet::new();
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if (dx, dy, dz) != (0, 0, 0) {
                            want.insert([dx, dy, dz]);
                        }
                    }
                }
            }
            assert_eq!(got, want, "k = {k}");
            assert_eq!(got.len(), k * k * k - 1);
        }
    }

    #[test]
    fn constructor_rejects_duplicates_and_out_of_grid() {
        let spec = kitti_spec();
        let dup = SparseVoxelTensor::new(
            spec.clone(),
            vec![[0, 0, 0], [0, 0, 0]],
            vec![1.0, 2.0],
            1,
        );
        assert!(dup.is_err());
        let oob = SparseVoxelTensor::new(spec, vec![[5000, 0, 0]], vec![1.0], 1);
        assert!(oob.is_err());
    }

    #[test]
    fn constructor_sorts_rows() {
        let spec = kitti_spec();
        let t = SparseVoxelTensor::new(
            spec,
            vec![[4, 0, 0], [1, 2, 3], [1, 2, 2]],
            vec![40.0, 123.0, 122.0],
            1,
        )
        .unwrap();
        assert_eq!(t.indices(), &[[1, 2, 2], [1, 2, 3], [4, 0, 0]]);
        assert_eq!(t.features(), &[122.0, 123.0, 40.0]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = kitti_spec();
        let t = SparseVoxelTensor::new(
            spec.clone(),
            vec![[3, 4, 5], [0, 1, 2]],
            vec![1.5, -0.25, 0.125, 2.0],
            2,
        )
        .unwrap();
        let stem = dir.path().join("vox");
        t.save(&stem).unwrap();
        let back = SparseVoxelTensor::load(&stem).unwrap();
        assert_eq!(back.indices(), t.indices());
        assert_eq!(back.channels(), 2);
        // f32 on disk: values chosen representable, so exact
        assert_eq!(back.features(), t.features());

        let empty = SparseVoxelTensor::empty(spec, 4).unwrap();
        let stem2 = dir.path().join("empty");
        empty.save(&stem2).unwrap();
        let back2 = SparseVoxelTensor::load(&stem2).unwrap();
        assert!(back2.is_empty());
        assert_eq!(back2.channels(), 4);
        assert!(!dir.path().join("empty.idx.npy").exists());
    }

    #[test]
    fn sidecar_roundtrip() {
        let mut spec = kitti_spec();
        spec.stride = 4;
        spec.center_offset = true;
        let line = spec.sidecar_line(16, 213);
        let (back, ch, n) = VoxelGridSpec::parse_sidecar_line(&line).unwrap();
        assert_eq!(back, spec);
        assert_eq!((ch, n), (16, 213));
        assert!(VoxelGridSpec::parse_sidecar_line("voxel_size=1,1").is_err());
    }

    proptest! {
        /// Voxelization's index set is permutation-invariant, and per-voxel
        /// means are too when the cap cannot truncate.
        #[test]
        fn voxelize_permutation_invariant(seed in any::<u64>()) {
            let spec = kitti_spec();
            let mut rng = Xoshiro256StarStar::seeded(seed);
            let n = 200;
            let mut rows: Vec<[f64; 4]> = (0..n).map(|_| [
                rng.uniform(0.0, 70.0),
                rng.uniform(-40.0, 40.0),
                rng.uniform(-3.0, 1.0),
                rng.uniform(0.0, 1.0),
            ]).collect();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let a = voxelize(&flat, 4, &spec, n).unwrap();
            // deterministic shuffle
            for i in (1..rows.len()).rev() {
                rows.swap(i, rng.below(i + 1));
            }
            let flat_b: Vec<f64> = rows.iter().flatten().copied().collect();
            let b = voxelize(&flat_b, 4, &spec, n).unwrap();
            prop_assert_eq!(a.indices(), b.indices());
            for row in 0..a.len() {
                prop_assert!((a.feature(row)[0] - b.feature(row)[0]).abs() < 1e-9);
            }
        }
    }
}
