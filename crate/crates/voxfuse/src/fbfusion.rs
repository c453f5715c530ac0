//! Foreground-background fusion: score every voxel's own importance and the
//! importance of replicating it onto each of its `k_s^3 - 1` neighbor
//! sites, split the voxel set by the center score, densify the foreground
//! by expansion, and run the fused set through a second attention pass.
//!
//! Scoring is a submanifold convolution: outputs exist only at occupied
//! voxels, absent neighbors contribute zero, and a sigmoid maps every score
//! into (0, 1). The per-voxel score vector is laid out neighbors-first with
//! the center score last ([`ScoreLayout::ExpandThenCenter`]); the swapped
//! layout is available since both orderings appear in the wild.
//!
//! Expansion policy, chosen to be deterministic and order-independent:
//! an expanded entry landing on any originally occupied voxel is dropped
//! (real data is never overwritten), several entries landing on the same
//! empty site are merged by arithmetic mean, and targets outside the grid
//! are dropped.

use crate::error::{Error, Result};
use crate::p2fusion::{saf_infer, SafParameters};
use crate::rng::Xoshiro256StarStar;
use crate::tensor::Tensor;
use crate::voxelgrid::{cube_offsets, neighbor_offsets, SparseVoxelTensor};

/// Ordering of the per-voxel score vector when flattened to `N x k_s^3`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreLayout {
    /// Neighbor scores first, center score last (the default).
    #[default]
    ExpandThenCenter,
    /// Center score first, neighbor scores after.
    CenterThenExpand,
}

/// Weights of the scoring convolution: for each of the `k_s^3` kernel taps
/// and `c_in` input channels, one weight per output score slot, plus a bias
/// per slot. Flat layout: `weights[(tap * c_in + c) * slots + slot]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubmanifoldKernel {
    pub k_s: usize,
    pub c_in: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SubmanifoldKernel {
    pub fn new(k_s: usize, c_in: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let kernel = Self {
            k_s,
            c_in,
            weights,
            bias,
        };
        kernel.validate()?;
        Ok(kernel)
    }

    /// All-zero weights and bias (every score becomes sigmoid(0) = 0.5).
    pub fn zeros(k_s: usize, c_in: usize) -> Result<Self> {
        let slots = k_s * k_s * k_s;
        Self::new(k_s, c_in, vec![0.0; slots * c_in * slots], vec![0.0; slots])
    }

    /// Seeded uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` with
    /// `fan_in = k_s^3 * c_in`.
    pub fn seeded(k_s: usize, c_in: usize, seed: u64) -> Result<Self> {
        let slots = k_s
            .checked_mul(k_s)
            .and_then(|x| x.checked_mul(k_s))
            .ok_or_else(|| Error::Argument("kernel size overflows".into()))?;
        let bound = 1.0 / ((slots * c_in.max(1)) as f64).sqrt();
        let mut rng = Xoshiro256StarStar::seeded(seed);
        let weights = (0..slots * c_in * slots)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        let bias = (0..slots).map(|_| rng.uniform(-bound, bound)).collect();
        Self::new(k_s, c_in, weights, bias)
    }

    pub fn slots(&self) -> usize {
        self.k_s * self.k_s * self.k_s
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_s == 0 || self.k_s % 2 == 0 {
            return Err(Error::Argument(format!(
                "kernel size must be odd, got {}",
                self.k_s
            )));
        }
        if self.c_in == 0 {
            return Err(Error::Argument("kernel needs c_in >= 1".into()));
        }
        let slots = self.slots();
        if self.weights.len() != slots * self.c_in * slots {
            return Err(Error::Argument(format!(
                "kernel weights have {} elements, want {}",
                self.weights.len(),
                slots * self.c_in * slots
            )));
        }
        if self.bias.len() != slots {
            return Err(Error::Argument(format!(
                "kernel bias has {} elements, want {slots}",
                self.bias.len()
            )));
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Argument("kernel weights must be finite".into()));
        }
        Ok(())
    }
}

/// Per-voxel importance scores, strictly inside (0, 1).
#[derive(Clone, Debug)]
pub struct ImportanceScores {
    k_s: usize,
    layout: ScoreLayout,
    /// Center (own) importance per voxel.
    center: Vec<f64>,
    /// Neighbor importances, `N x (k_s^3 - 1)`, in neighbor-offset order.
    neighbors: Vec<f64>,
}

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    pub fn k_s(&self) -> usize {
        self.k_s
    }

    pub fn layout(&self) -> ScoreLayout {
        self.layout
    }

    /// Own importance of voxel `i` (drives the foreground split).
    pub fn center(&self, i: usize) -> f64 {
        self.center[i]
    }

    /// Importance of expanding voxel `i` onto neighbor slot `slot`.
    pub fn neighbor(&self, i: usize, slot: usize) -> f64 {
        let m = self.k_s.pow(3) - 1;
        self.neighbors[i * m + slot]
    }

    /// Flatten to `N x k_s^3` in the configured layout.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let n = self.len();
        let slots = self.k_s.pow(3);
        let m = slots - 1;
        let mut data = vec![0.0; n * slots];
        for i in 0..n {
            let row = &mut data[i * slots..(i + 1) * slots];
            match self.layout {
                ScoreLayout::ExpandThenCenter => {
                    row[..m].copy_from_slice(&self.neighbors[i * m..(i + 1) * m]);
                    row[m] = self.center[i];
                }
                ScoreLayout::CenterThenExpand => {
                    row[0] = self.center[i];
                    row[1..].copy_from_slice(&self.neighbors[i * m..(i + 1) * m]);
                }
            }
        }
        Tensor::from_f64(vec![n.max(1), slots], if n == 0 { vec![0.5; slots] } else { data })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Score every occupied voxel with the submanifold convolution + sigmoid.
/// Output slot `o` (in the configured layout) is one importance score; taps
/// gather features from occupied neighbors only, absent sites contribute
/// zero.
pub fn score_importance(
    t: &SparseVoxelTensor,
    kernel: &SubmanifoldKernel,
    layout: ScoreLayout,
) -> Result<ImportanceScores> {
    kernel.validate()?;
    if kernel.c_in != t.channels() {
        return Err(Error::Argument(format!(
            "kernel expects {} channels, tensor has {}",
            kernel.c_in,
            t.channels()
        )));
    }
    let slots = kernel.slots();
    let m = slots - 1;
    let taps = cube_offsets(kernel.k_s)?;
    let c = t.channels();
    let n = t.len();
    let ext = t.spec().strided_extents();

    let mut center = vec![0.0; n];
    let mut neighbors = vec![0.0; n * m];
    let mut acc = vec![0.0; slots];
    for i in 0..n {
        acc.copy_from_slice(&kernel.bias);
        let base = t.indices()[i];
        for (tap, off) in taps.iter().enumerate() {
            let Some(pos) = offset_index(base, *off, ext) else {
                continue;
            };
            let Some(row) = t.lookup(pos) else {
                continue;
            };
            let feat = t.feature(row);
            for (cc, &f) in feat.iter().enumerate() {
                let wrow = &kernel.weights[(tap * c + cc) * slots..(tap * c + cc + 1) * slots];
                for (a, &w) in acc.iter_mut().zip(wrow) {
                    *a += w * f;
                }
            }
        }
        for (o, &a) in acc.iter().enumerate() {
            let s = sigmoid(a);
            // slot -> (center | neighbor id) under the layout
            match layout {
                ScoreLayout::ExpandThenCenter => {
                    if o == m {
                        center[i] = s;
                    } else {
                        neighbors[i * m + o] = s;
                    }
                }
                ScoreLayout::CenterThenExpand => {
                    if o == 0 {
                        center[i] = s;
                    } else {
                        neighbors[i * m + (o - 1)] = s;
                    }
                }
            }
        }
    }
    Ok(ImportanceScores {
        k_s: kernel.k_s,
        layout,
        center,
        neighbors,
    })
}

fn offset_index(base: [u32; 3], off: [i32; 3], ext: [usize; 3]) -> Option<[u32; 3]> {
    let mut out = [0u32; 3];
    for a in 0..3 {
        let v = base[a] as i64 + off[a] as i64;
        if v < 0 || v >= ext[a] as i64 {
            return None;
        }
        out[a] = v as u32;
    }
    Some(out)
}

/// Partition of voxel rows by center importance.
#[derive(Clone, Debug, Default)]
pub struct FbSplit {
    pub fore_rows: Vec<usize>,
    pub back_rows: Vec<usize>,
}

impl FbSplit {
    pub fn alpha(&self) -> usize {
        self.fore_rows.len()
    }

    pub fn beta(&self) -> usize {
        self.back_rows.len()
    }
}

/// Split rows into foreground (`center > threshold`, strictly) and
/// background. `threshold` must lie in (0, 1).
pub fn split_foreground_background(
    t: &SparseVoxelTensor,
    scores: &ImportanceScores,
    threshold: f64,
) -> Result<FbSplit> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!(
            "importance threshold must be in (0, 1), got {threshold}"
        )));
    }
    if scores.len() != t.len() {
        return Err(Error::Argument(format!(
            "{} score rows for {} voxels",
            scores.len(),
            t.len()
        )));
    }
    let mut split = FbSplit::default();
    for i in 0..t.len() {
        if scores.center(i) > threshold {
            split.fore_rows.push(i);
        } else {
            split.back_rows.push(i);
        }
    }
    Ok(split)
}

/// A foreground feature replicated onto a neighbor site, weighted by that
/// site's importance score.
#[derive(Clone, Debug)]
pub struct ExpandedEntry {
    pub source_row: usize,
    pub offset_id: usize,
    pub target: [u32; 3],
    pub feature: Vec<f64>,
}

/// EXPAND + DISCARD: for every foreground row and neighbor slot whose score
/// exceeds the threshold, emit the source feature scaled by the score at
/// the neighbor site. Neighbor sites outside the grid are dropped.
pub fn expand_and_discard(
    t: &SparseVoxelTensor,
    split: &FbSplit,
    scores: &ImportanceScores,
    threshold: f64,
) -> Result<Vec<ExpandedEntry>> {
    if scores.len() != t.len() {
        return Err(Error::Argument(format!(
            "{} score rows for {} voxels",
            scores.len(),
            t.len()
        )));
    }
    let offsets = neighbor_offsets(scores.k_s())?;
    let ext = t.spec().strided_extents();
    let mut out = Vec::new();
    for &row in &split.fore_rows {
        let base = t.indices()[row];
        for (slot, off) in offsets.iter().enumerate() {
            let s = scores.neighbor(row, slot);
            if !(s > threshold) {
                continue; // DISCARD
            }
            let Some(target) = offset_index(base, *off, ext) else {
                continue;
            };
            let feature = t.feature(row).iter().map(|&f| f * s).collect();
            out.push(ExpandedEntry {
                source_row: row,
                offset_id: slot,
                target,
                feature,
            });
        }
    }
    Ok(out)
}

/// Union of the foreground voxels and the surviving expanded entries.
/// Entries landing on any originally occupied voxel are dropped; entries
/// sharing an empty target are merged by arithmetic mean.
pub fn assemble_dense_foreground(
    t: &SparseVoxelTensor,
    split: &FbSplit,
    expanded: &[ExpandedEntry],
) -> Result<SparseVoxelTensor> {
    let c = t.channels();
    let mut indices: Vec<[u32; 3]> = Vec::with_capacity(split.alpha() + expanded.len());
    let mut features: Vec<f64> = Vec::with_capacity((split.alpha() + expanded.len()) * c);
    for &row in &split.fore_rows {
        indices.push(t.indices()[row]);
        features.extend_from_slice(t.feature(row));
    }

    // merge expanded entries per empty target: stable sort groups equal
    // targets while keeping emission order, so the mean accumulates in a
    // fixed order regardless of how the entries were produced
    let mut surviving: Vec<&ExpandedEntry> = expanded
        .iter()
        .filter(|e| t.lookup(e.target).is_none())
        .collect();
    surviving.sort_by_key(|e| e.target);
    let mut i = 0;
    while i < surviving.len() {
        let target = surviving[i].target;
        let mut j = i + 1;
        while j < surviving.len() && surviving[j].target == target {
            j += 1;
        }
        indices.push(target);
        let at = features.len();
        features.extend_from_slice(&surviving[i].feature);
        for e in &surviving[i + 1..j] {
            for (s, &f) in features[at..].iter_mut().zip(&e.feature) {
                *s += f;
            }
        }
        let inv = 1.0 / (j - i) as f64;
        for s in &mut features[at..] {
            *s *= inv;
        }
        i = j;
    }
    SparseVoxelTensor::new(t.spec().clone(), indices, features, c)
}

/// Options for the end-to-end foreground-background pass.
#[derive(Clone, Copy, Debug)]
pub struct FbOptions {
    pub threshold: f64,
    pub layout: ScoreLayout,
    /// Attention chunk size for the fusion pass; None = full attention.
    pub chunk: Option<usize>,
}

impl Default for FbOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            layout: ScoreLayout::default(),
            chunk: None,
        }
    }
}

/// Seeded parameter bundle: scoring kernel + attention weights for the
/// final pass (which runs with K = 1, so its MLP is C -> C).
#[derive(Clone, Debug)]
pub struct FbParams {
    pub kernel: SubmanifoldKernel,
    pub saf: SafParameters,
}

impl FbParams {
    pub fn seeded(k_s: usize, channels: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            kernel: SubmanifoldKernel::seeded(k_s, channels, seed)?,
            saf: SafParameters::seeded(1, channels, seed.wrapping_add(1))?,
        })
    }
}

/// Counters reported by [`fb_fuse`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FbSummary {
    pub input_voxels: usize,
    pub alpha: usize,
    pub beta: usize,
    pub expanded: usize,
    pub output_voxels: usize,
}

/// Full pass: score, split, expand/discard, assemble, then fuse the
/// concatenation of dense foreground and background through the attention
/// block (K = 1: the patch tensor degenerates to the feature itself).
/// Output voxel count is `|foreground_dense| + beta`.
pub fn fb_fuse(
    t: &SparseVoxelTensor,
    params: &FbParams,
    opts: &FbOptions,
) -> Result<(SparseVoxelTensor, FbSummary)> {
    let c = t.channels();
    if t.is_empty() {
        let out = SparseVoxelTensor::empty(t.spec().clone(), c)?;
        return Ok((out, FbSummary::default()));
    }
    let scores = score_importance(t, &params.kernel, opts.layout)?;
    let split = split_foreground_background(t, &scores, opts.threshold)?;
    let expanded = expand_and_discard(t, &split, &scores, opts.threshold)?;
    let fore_dense = assemble_dense_foreground(t, &split, &expanded)?;

    // concatenate rows: dense foreground first, then background
    let n_out = fore_dense.len() + split.beta();
    let mut indices = Vec::with_capacity(n_out);
    let mut feats = Vec::with_capacity(n_out * c);
    indices.extend_from_slice(fore_dense.indices());
    feats.extend_from_slice(fore_dense.features());
    for &row in &split.back_rows {
        indices.push(t.indices()[row]);
        feats.extend_from_slice(t.feature(row));
    }

    let summary = FbSummary {
        input_voxels: t.len(),
        alpha: split.alpha(),
        beta: split.beta(),
        expanded: expanded.len(),
        output_voxels: n_out,
    };

    let f_kiv = Tensor::from_f64(vec![n_out, 1, c], feats.clone())?;
    let f_iv = Tensor::from_f64(vec![n_out, c], feats)?;
    let fused = saf_infer(&f_kiv, &f_iv, &params.saf, opts.chunk)?;
    let out = SparseVoxelTensor::new(t.spec().clone(), indices, fused.to_f64_vec(), c)?;
    Ok((out, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256StarStar;
    use crate::voxelgrid::VoxelGridSpec;
    use std::collections::HashSet;

    fn small_spec() -> VoxelGridSpec {
        VoxelGridSpec::new([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [8.0, 8.0, 8.0], 1).unwrap()
    }

    fn random_tensor(n_target: usize, c: usize, seed: u64) -> SparseVoxelTensor {
        let spec = small_spec();
        let mut rng = Xoshiro256StarStar::seeded(seed);
        let mut seen = HashSet::new();
        let mut indices = Vec::new();
        while indices.len() < n_target {
            let idx = [
                rng.below(8) as u32,
                rng.below(8) as u32,
                rng.below(8) as u32,
            ];
            if seen.insert(idx) {
                indices.push(idx);
            }
        }
        let features: Vec<f64> = (0..n_target * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        SparseVoxelTensor::new(spec, indices, features, c).unwrap()
    }

    #[test]
    fn zero_kernel_gives_half_scores() {
        let t = random_tensor(20, 4, 1);
        let kernel = SubmanifoldKernel::zeros(3, 4).unwrap();
        let scores = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
        for i in 0..t.len() {
            assert_eq!(scores.center(i), 0.5);
            for slot in 0..26 {
                assert_eq!(scores.neighbor(i, slot), 0.5);
            }
        }
    }

    #[test]
    fn isolated_voxel_uses_center_tap_only() {
        let spec = small_spec();
        let t = SparseVoxelTensor::new(spec, vec![[4, 4, 4]], vec![1.0, -0.5], 2).unwrap();
        let kernel = SubmanifoldKernel::seeded(3, 2, 7).unwrap();
        let scores = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
        // hand-computed: only the center tap (lexicographic position 13)
        // contributes
        let slots = 27;
        let taps = cube_offsets(3).unwrap();
        let center_tap = taps.iter().position(|&o| o == [0, 0, 0]).unwrap();
        for o in 0..slots {
            let mut acc = kernel.bias[o];
            for (cc, &f) in t.feature(0).iter().enumerate() {
                acc += kernel.weights[(center_tap * 2 + cc) * slots + o] * f;
            }
            let want = sigmoid(acc);
            let got = if o == slots - 1 {
                scores.center(0)
            } else {
                scores.neighbor(0, o)
            };
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_strictly_in_unit_interval() {
        let t = random_tensor(40, 3, 2);
        let kernel = SubmanifoldKernel::seeded(3, 3, 3).unwrap();
        let scores = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
        for i in 0..t.len() {
            assert!(scores.center(i) > 0.0 && scores.center(i) < 1.0);
            for s in 0..26 {
                let v = scores.neighbor(i, s);
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    /// Dense-grid convolution oracle on the full 8^3 grid, masked to
    /// occupied sites.
    fn dense_oracle(
        t: &SparseVoxelTensor,
        kernel: &SubmanifoldKernel,
    ) -> Vec<Vec<f64>> {
        let ext = t.spec().strided_extents();
        let c = t.channels();
        let slots = kernel.slots();
        let mut dense = vec![0.0; ext[0] * ext[1] * ext[2] * c];
        for (row, idx) in t.indices().iter().enumerate() {
            let at =
                ((idx[0] as usize * ext[1] + idx[1] as usize) * ext[2] + idx[2] as usize) * c;
            dense[at..at + c].copy_from_slice(t.feature(row));
        }
        let taps = cube_offsets(kernel.k_s).unwrap();
        let mut out = Vec::with_capacity(t.len());
        for idx in t.indices() {
            let mut acc = kernel.bias.clone();
            for (tap, off) in taps.iter().enumerate() {
                let x = idx[0] as i64 + off[0] as i64;
                let y = idx[1] as i64 + off[1] as i64;
                let z = idx[2] as i64 + off[2] as i64;
                if x < 0
                    || y < 0
                    || z < 0
                    || x >= ext[0] as i64
                    || y >= ext[1] as i64
                    || z >= ext[2] as i64
                {
                    continue;
                }
                let at = ((x as usize * ext[1] + y as usize) * ext[2] + z as usize) * c;
                for cc in 0..c {
                    let f = dense[at + cc];
                    for o in 0..slots {
                        acc[o] += kernel.weights[(tap * c + cc) * slots + o] * f;
                    }
                }
            }
            out.push(acc.iter().map(|&a| sigmoid(a)).collect());
        }
        out
    }

    #[test]
    fn submanifold_matches_dense_grid_oracle() {
        for (seed, n) in [(10u64, 51), (11, 128), (12, 256)] {
            // 8^3 grid at 10-50% occupancy
            let t = random_tensor(n, 3, seed);
            let kernel = SubmanifoldKernel::seeded(3, 3, seed + 100).unwrap();
            let scores = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
            let want = dense_oracle(&t, &kernel);
            for i in 0..t.len() {
                assert!((scores.center(i) - want[i][26]).abs() <= 1e-5);
                for slot in 0..26 {
                    assert!(
                        (scores.neighbor(i, slot) - want[i][slot]).abs() <= 1e-5,
                        "seed {seed} row {i} slot {slot}"
                    );
                }
            }
        }
    }

    #[test]
    fn layout_flag_changes_center_interpretation() {
        let t = random_tensor(10, 2, 20);
        let kernel = SubmanifoldKernel::seeded(3, 2, 21).unwrap();
        let a = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
        let b = score_importance(&t, &kernel, ScoreLayout::CenterThenExpand).unwrap();
        // flattening restores the raw conv channel order under both layouts
        let ta = a.to_tensor().unwrap();
        let tb = b.to_tensor().unwrap();
        assert!(ta.bitwise_eq(&tb));
        // but the center score reads a different channel
        for i in 0..t.len() {
            assert_eq!(a.center(i), ta.get(&[i, 26]));
            assert_eq!(b.center(i), ta.get(&[i, 0]));
            assert_eq!(a.neighbor(i, 0), ta.get(&[i, 0]));
            assert_eq!(b.neighbor(i, 0), ta.get(&[i, 1]));
        }
    }

    fn constant_scores(n: usize, center: f64, neighbor: f64) -> ImportanceScores {
        ImportanceScores {
            k_s: 3,
            layout: ScoreLayout::ExpandThenCenter,
            center: vec![center; n],
            neighbors: vec![neighbor; n * 26],
        }
    }

    #[test]
    fn split_all_foreground_and_all_background() {
        let t = random_tensor(30, 2, 30);
        let hi = constant_scores(30, 0.9, 0.5);
        let split = split_foreground_background(&t, &hi, 0.5).unwrap();
        assert_eq!((split.alpha(), split.beta()), (30, 0));
        let lo = constant_scores(30, 0.1, 0.5);
        let split = split_foreground_background(&t, &lo, 0.5).unwrap();
        assert_eq!((split.alpha(), split.beta()), (0, 30));
        assert!(split_foreground_background(&t, &hi, 0.0).is_err());
        assert!(split_foreground_background(&t, &hi, 1.0).is_err());
    }

    #[test]
    fn split_matches_bruteforce_partition() {
        let t = random_tensor(64, 2, 31);
        let kernel = SubmanifoldKernel::seeded(3, 2, 32).unwrap();
        let scores = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
        let threshold = 0.5;
        let split = split_foreground_background(&t, &scores, threshold).unwrap();
        let fore: HashSet<usize> = split.fore_rows.iter().copied().collect();
        let back: HashSet<usize> = split.back_rows.iter().copied().collect();
        assert_eq!(fore.len() + back.len(), t.len());
        assert!(fore.is_disjoint(&back));
        for i in 0..t.len() {
            if scores.center(i) > threshold {
                assert!(fore.contains(&i));
            } else {
                assert!(back.contains(&i));
            }
        }
    }

    #[test]
    fn all_neighbor_scores_below_threshold_expand_nothing() {
        let t = random_tensor(20, 2, 40);
        let scores = constant_scores(20, 0.9, 0.3);
        let split = split_foreground_background(&t, &scores, 0.5).unwrap();
        let expanded = expand_and_discard(&t, &split, &scores, 0.5).unwrap();
        assert!(expanded.is_empty());
    }

    #[test]
    fn interior_voxel_expands_to_all_26_weighted_sites() {
        let spec = small_spec();
        let t = SparseVoxelTensor::new(spec, vec![[4, 4, 4]], vec![2.0, -1.0], 2).unwrap();
        let s = 0.75;
        let scores = constant_scores(1, 0.9, s);
        let split = split_foreground_background(&t, &scores, 0.5).unwrap();
        let expanded = expand_and_discard(&t, &split, &scores, 0.5).unwrap();
        assert_eq!(expanded.len(), 26);
        for e in &expanded {
            assert_eq!(e.source_row, 0);
            assert!((e.feature[0] - 2.0 * s).abs() < 1e-15);
            assert!((e.feature[1] - -1.0 * s).abs() < 1e-15);
        }
        let targets: HashSet<[u32; 3]> = expanded.iter().map(|e| e.target).collect();
        assert_eq!(targets.len(), 26);
    }

    #[test]
    fn corner_voxel_drops_out_of_grid_targets() {
        let spec = small_spec();
        let t = SparseVoxelTensor::new(spec, vec![[0, 0, 0]], vec![1.0], 1).unwrap();
        let scores = constant_scores(1, 0.9, 0.9);
        let split = split_foreground_background(&t, &scores, 0.5).unwrap();
        let expanded = expand_and_discard(&t, &split, &scores, 0.5).unwrap();
        // corner keeps only the 7 in-grid neighbors of a 2x2x2 corner cube
        assert_eq!(expanded.len(), 7);
    }

    #[test]
    fn expansion_count_matches_enumeration_oracle() {
        let t = random_tensor(100, 2, 50);
        let kernel = SubmanifoldKernel::seeded(3, 2, 51).unwrap();
        let scores = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
        let threshold = 0.5;
        let split = split_foreground_background(&t, &scores, threshold).unwrap();
        let expanded = expand_and_discard(&t, &split, &scores, threshold).unwrap();

        let offsets = neighbor_offsets(3).unwrap();
        let ext = t.spec().strided_extents();
        let mut want = 0;
        for &row in &split.fore_rows {
            for (slot, off) in offsets.iter().enumerate() {
                if scores.neighbor(row, slot) > threshold
                    && offset_index(t.indices()[row], *off, ext).is_some()
                {
                    want += 1;
                }
            }
        }
        assert_eq!(expanded.len(), want);
        for e in &expanded {
            assert!(split.fore_rows.contains(&e.source_row));
            assert!(scores.neighbor(e.source_row, e.offset_id) > threshold);
        }
    }

    #[test]
    fn assemble_without_expansion_is_foreground_subset() {
        let t = random_tensor(30, 3, 60);
        let kernel = SubmanifoldKernel::seeded(3, 3, 61).unwrap();
        let scores = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
        let split = split_foreground_background(&t, &scores, 0.5).unwrap();
        let dense = assemble_dense_foreground(&t, &split, &[]).unwrap();
        assert_eq!(dense.len(), split.alpha());
        for &row in &split.fore_rows {
            let idx = t.indices()[row];
            let drow = dense.lookup(idx).expect("foreground voxel present");
            assert_eq!(dense.feature(drow), t.feature(row));
        }
    }

    #[test]
    fn expansion_colliding_with_occupied_voxel_is_dropped() {
        let spec = small_spec();
        // two adjacent voxels, both foreground
        let t = SparseVoxelTensor::new(
            spec,
            vec![[4, 4, 4], [4, 4, 5]],
            vec![1.0, 10.0],
            1,
        )
        .unwrap();
        let scores = constant_scores(2, 0.9, 0.9);
        let split = split_foreground_background(&t, &scores, 0.5).unwrap();
        let expanded = expand_and_discard(&t, &split, &scores, 0.5).unwrap();
        let dense = assemble_dense_foreground(&t, &split, &expanded).unwrap();
        // both original features survive unchanged
        let r0 = dense.lookup([4, 4, 4]).unwrap();
        let r1 = dense.lookup([4, 4, 5]).unwrap();
        assert_eq!(dense.feature(r0), &[1.0]);
        assert_eq!(dense.feature(r1), &[10.0]);
        // voxel count: alpha + unique non-colliding targets
        let mut targets: HashSet<[u32; 3]> = HashSet::new();
        for e in &expanded {
            if t.lookup(e.target).is_none() {
                targets.insert(e.target);
            }
        }
        assert_eq!(dense.len(), split.alpha() + targets.len());
    }

    #[test]
    fn colliding_expansions_merge_by_mean() {
        let spec = small_spec();
        // voxels at z=4 and z=6 both expand onto z=5
        let t = SparseVoxelTensor::new(
            spec,
            vec![[4, 4, 4], [4, 4, 6]],
            vec![1.0, 3.0],
            1,
        )
        .unwrap();
        let s = 0.8;
        let scores = constant_scores(2, 0.9, s);
        let split = split_foreground_background(&t, &scores, 0.5).unwrap();
        let expanded = expand_and_discard(&t, &split, &scores, 0.5).unwrap();
        let dense = assemble_dense_foreground(&t, &split, &expanded).unwrap();
        let mid = dense.lookup([4, 4, 5]).unwrap();
        let want = (1.0 * s + 3.0 * s) / 2.0;
        assert!((dense.feature(mid)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn fb_fuse_empty_input_gives_empty_output() {
        let t = SparseVoxelTensor::empty(small_spec(), 4).unwrap();
        let params = FbParams::seeded(3, 4, 0).unwrap();
        let (out, summary) = fb_fuse(&t, &params, &FbOptions::default()).unwrap();
        assert!(out.is_empty());
        assert_eq!(summary, FbSummary::default());
    }

    #[test]
    fn fb_fuse_high_threshold_keeps_n_constant() {
        // T = 0.99: scores can exceed it only rarely; with a zero kernel
        // all scores are exactly 0.5, so everything is background
        let t = random_tensor(25, 3, 70);
        let params = FbParams {
            kernel: SubmanifoldKernel::zeros(3, 3).unwrap(),
            saf: SafParameters::seeded(1, 3, 71).unwrap(),
        };
        let opts = FbOptions {
            threshold: 0.99,
            ..Default::default()
        };
        let (out, summary) = fb_fuse(&t, &params, &opts).unwrap();
        assert_eq!(summary.alpha, 0);
        assert_eq!(summary.beta, 25);
        assert_eq!(summary.expanded, 0);
        assert_eq!(out.len(), 25);
        assert_eq!(out.indices(), t.indices());
    }

    #[test]
    fn fb_fuse_partition_invariant_and_uniqueness() {
        for seed in [80u64, 81, 82, 83] {
            let t = random_tensor(60, 4, seed);
            let params = FbParams::seeded(3, 4, seed + 1).unwrap();
            let (out, summary) = fb_fuse(&t, &params, &FbOptions::default()).unwrap();
            assert_eq!(summary.alpha + summary.beta, summary.input_voxels);
            assert_eq!(summary.input_voxels, 60);
            assert_eq!(out.len(), summary.output_voxels);
            let unique: HashSet<[u32; 3]> = out.indices().iter().copied().collect();
            assert_eq!(unique.len(), out.len());
            assert!(out.len() >= t.len());
        }
    }

    #[test]
    fn fb_fuse_monotone_in_threshold() {
        let t = random_tensor(80, 3, 90);
        let params = FbParams::seeded(3, 3, 91).unwrap();
        let mut prev_alpha = usize::MAX;
        let mut prev_expanded = usize::MAX;
        for i in 1..=9 {
            let opts = FbOptions {
                threshold: i as f64 / 10.0,
                ..Default::default()
            };
            let (_, summary) = fb_fuse(&t, &params, &opts).unwrap();
            assert!(summary.alpha <= prev_alpha);
            assert!(summary.expanded <= prev_expanded);
            prev_alpha = summary.alpha;
            prev_expanded = summary.expanded;
        }
    }

    #[test]
    fn fb_fuse_deterministic() {
        let t = random_tensor(50, 4, 95);
        let params = FbParams::seeded(3, 4, 96).unwrap();
        let (a, sa) = fb_fuse(&t, &params, &FbOptions::default()).unwrap();
        let (b, sb) = fb_fuse(&t, &params, &FbOptions::default()).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.indices(), b.indices());
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn expanded_features_bounded_by_source() {
        let t = random_tensor(60, 3, 97);
        let kernel = SubmanifoldKernel::seeded(3, 3, 98).unwrap();
        let scores = score_importance(&t, &kernel, ScoreLayout::ExpandThenCenter).unwrap();
        let split = split_foreground_background(&t, &scores, 0.5).unwrap();
        let expanded = expand_and_discard(&t, &split, &scores, 0.5).unwrap();
        for e in &expanded {
            for (got, src) in e.feature.iter().zip(t.feature(e.source_row)) {
                assert!(got.abs() <= src.abs() + 1e-15);
            }
        }
    }
}
