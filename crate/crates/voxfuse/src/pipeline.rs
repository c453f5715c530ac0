//! End-to-end composition of the fusion stages, plus the scene-directory
//! conventions shared by the CLI. Every CLI command is a thin wrapper over
//! a function here, so library calls on the same files reproduce CLI
//! output bit for bit.
//!
//! A scene directory holds `points.bin` (packed f32 LiDAR records),
//! `calib.txt`, `features.npy` (quarter-resolution feature map, f32),
//! `boxes.txt` (one oriented box plus difficulty label per line), and
//! optionally `augment.txt` (recorded augmentations to undo before
//! projection).

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::analytics::{box_point_counts, occupancy, Difficulty, OrientedBox};
use crate::calib::{
    project_points, read_velodyne_bin, write_velodyne_bin, AugmentationRecord, KittiCalibration,
};
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::fbfusion::{
    expand_and_discard, fb_fuse, score_importance, split_foreground_background, FbOptions,
    FbParams,
};
use crate::p2fusion::{patch_fusion, point_fusion, saf_infer, Combiner, SafParameters};
use crate::rng::Xoshiro256StarStar;
use crate::scenegen::Scene;
use crate::tensor::{bilinear_upsample, read_npy, write_npy, FeatureMap, Tensor};
use crate::voxelgrid::{voxelize, SparseVoxelTensor};

const STREAM_EMBED: u64 = 11;
const STREAM_SAF: u64 = 12;
const STREAM_FB: u64 = 13;

/// Everything the fusion pipeline consumes.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub points: Vec<[f64; 4]>,
    pub calib: KittiCalibration,
    pub features: FeatureMap,
    pub boxes: Vec<OrientedBox>,
    pub difficulties: Vec<Difficulty>,
    pub augmentation: AugmentationRecord,
}

/// Serialize boxes as `cx cy cz sx sy sz yaw difficulty` lines.
pub fn boxes_to_text(boxes: &[OrientedBox], difficulties: &[Difficulty]) -> String {
    let mut out = String::new();
    for (b, d) in boxes.iter().zip(difficulties) {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw,
            d.as_str()
        ));
    }
    out
}

pub fn parse_boxes_str(text: &str) -> Result<(Vec<OrientedBox>, Vec<Difficulty>)> {
    let mut boxes = Vec::new();
    let mut difficulties = Vec::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(Error::Parse(format!(
                "boxes: expected 8 fields per line, got {} in '{line}'"
            , toks.len())));
        }
        let mut vals = [0.0f64; 7];
        for (i, tok) in toks[..7].iter().enumerate() {
            vals[i] = tok
                .parse()
                .map_err(|_| Error::Parse(format!("boxes: bad number '{tok}'")))?;
        }
        boxes.push(OrientedBox {
            center: [vals[0], vals[1], vals[2]],
            size: [vals[3], vals[4], vals[5]],
            yaw: vals[6],
        });
        difficulties.push(Difficulty::parse(toks[7])?);
    }
    Ok((boxes, difficulties))
}

/// Write a generated scene plus its feature map into `dir` using the
/// standard file names.
pub fn write_scene(scene: &Scene, features: &FeatureMap, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_velodyne_bin(&scene.points_f32(), dir.join("points.bin"))?;
    fs::write(dir.join("calib.txt"), scene.calib.to_calib_string())
        .map_err(|e| Error::io(dir.join("calib.txt"), e))?;
    write_npy(&features.to_tensor_f32(), dir.join("features.npy"))?;
    fs::write(
        dir.join("boxes.txt"),
        boxes_to_text(&scene.boxes, &scene.difficulties),
    )
    .map_err(|e| Error::io(dir.join("boxes.txt"), e))?;
    Ok(())
}

/// Load a scene directory written by [`write_scene`] (or assembled by
/// hand from real data in the same formats).
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<SceneInputs> {
    let dir = dir.as_ref();
    let raw = read_velodyne_bin(dir.join("points.bin"))?;
    let points: Vec<[f64; 4]> = raw
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64])
        .collect();
    let calib = KittiCalibration::from_file(dir.join("calib.txt"))?;
    let features = FeatureMap::from_tensor(&read_npy(dir.join("features.npy"))?)?;
    let boxes_text = fs::read_to_string(dir.join("boxes.txt"))
        .map_err(|e| Error::io(dir.join("boxes.txt"), e))?;
    let (boxes, difficulties) = parse_boxes_str(&boxes_text)?;
    let augment_path = dir.join("augment.txt");
    let augmentation = if augment_path.exists() {
        let text = fs::read_to_string(&augment_path).map_err(|e| Error::io(&augment_path, e))?;
        AugmentationRecord::parse_str(&text)?
    } else {
        AugmentationRecord::empty()
    };
    Ok(SceneInputs {
        points,
        calib,
        features,
        boxes,
        difficulties,
        augmentation,
    })
}

/// Lift raw voxel attributes to the configured channel width with a seeded
/// linear map; stands in for the first sparse-convolution encoder layer.
pub fn embed_features(t: &SparseVoxelTensor, c_out: usize, seed: u64) -> Result<SparseVoxelTensor> {
    let c_in = t.channels();
    if c_in == 0 {
        return Err(Error::Argument(
            "cannot embed voxels with zero attribute channels".into(),
        ));
    }
    let mut rng = Xoshiro256StarStar::seeded(seed);
    let bound = 1.0 / (c_in as f64).sqrt();
    let w: Vec<f64> = (0..c_in * c_out)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    let b: Vec<f64> = (0..c_out).map(|_| rng.uniform(-bound, bound)).collect();
    let mut out = vec![0.0; t.len() * c_out];
    for row in 0..t.len() {
        let feat = t.feature(row);
        let dst = &mut out[row * c_out..(row + 1) * c_out];
        dst.copy_from_slice(&b);
        for (cc, &f) in feat.iter().enumerate() {
            for (o, &wv) in dst.iter_mut().zip(&w[cc * c_out..(cc + 1) * c_out]) {
                *o += wv * f;
            }
        }
    }
    t.with_features(out, c_out)
}

/// Per-run counters reported by the fuse pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FuseReport {
    pub n_points: usize,
    pub n_voxels: usize,
    pub alpha: usize,
    pub beta: usize,
    pub expanded: usize,
    pub output_voxels: usize,
    pub wall_ms: f64,
}

impl FuseReport {
    pub fn to_kv_lines(&self) -> String {
        format!(
            "n_points: {}\nn_voxels: {}\nalpha: {}\nbeta: {}\nexpanded: {}\noutput_voxels: {}\nwall_ms: {:.3}\n",
            self.n_points, self.n_voxels, self.alpha, self.beta, self.expanded,
            self.output_voxels, self.wall_ms
        )
    }
}

/// Optional inspection dumps of the foreground-background stage.
#[derive(Clone, Debug)]
pub struct FuseIntermediates {
    /// Flattened importance scores, `N x k_s^3` in the configured layout.
    pub scores: Tensor,
    /// 1.0 for foreground rows, 0.0 for background.
    pub fore_mask: Vec<f64>,
    /// Surviving expansion targets, one `(x, y, z)` triple per entry.
    pub expanded_targets: Vec<[u32; 3]>,
}

/// Outputs of the full fuse pipeline.
#[derive(Clone, Debug)]
pub struct FuseOutputs {
    /// Input voxels carrying their fused features.
    pub fused: SparseVoxelTensor,
    /// Densified output of the foreground-background stage.
    pub fb: SparseVoxelTensor,
    pub report: FuseReport,
    pub intermediates: Option<FuseIntermediates>,
}

/// Voxelize and fuse a full scene.
pub fn run_fuse(
    inputs: &SceneInputs,
    config: &FusionConfig,
    want_intermediates: bool,
) -> Result<FuseOutputs> {
    config.validate()?;
    let spec = config.grid_spec()?;
    let flat: Vec<f64> = inputs.points.iter().flatten().copied().collect();
    let voxels = voxelize(&flat, 4, &spec, config.max_points_per_voxel)?;
    let mut out = fuse_voxels(
        &voxels,
        &inputs.calib,
        &inputs.features,
        &inputs.augmentation,
        config,
        want_intermediates,
    )?;
    out.report.n_points = inputs.points.len();
    Ok(out)
}

/// The pipeline after voxelization: embed, project, patch-point fusion,
/// then foreground-background fusion.
pub fn fuse_voxels(
    voxels: &SparseVoxelTensor,
    calib: &KittiCalibration,
    features: &FeatureMap,
    augmentation: &AugmentationRecord,
    config: &FusionConfig,
    want_intermediates: bool,
) -> Result<FuseOutputs> {
    config.validate()?;
    let start = Instant::now();
    let c_img = features.channels();
    if config.combiner == Combiner::Add && c_img != config.channels {
        return Err(Error::Argument(format!(
            "feature map has {c_img} channels but fusion.channels = {} (add mode)",
            config.channels
        )));
    }
    let c_fused = match config.combiner {
        Combiner::Add => config.channels,
        Combiner::Concat => c_img + config.channels,
    };

    if voxels.is_empty() {
        let fused = SparseVoxelTensor::empty(voxels.spec().clone(), c_fused)?;
        let fb = SparseVoxelTensor::empty(voxels.spec().clone(), c_fused)?;
        return Ok(FuseOutputs {
            fused,
            fb,
            report: FuseReport {
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                ..Default::default()
            },
            intermediates: None,
        });
    }

    // stage-1 encoder stand-in: lift attributes to the working width
    let embedded = embed_features(
        voxels,
        config.channels,
        Xoshiro256StarStar::stream(config.seed, STREAM_EMBED).next_u64(),
    )?;

    // restore full image resolution, then project voxel positions
    let full_w = features.width() * 4;
    let full_h = features.height() * 4;
    let upsampled = bilinear_upsample(features, full_w, full_h)?;
    let centers = embedded.indices_to_world();
    let original = augmentation.invert(&centers);
    let mut proj = project_points(&original, calib, full_w, full_h);
    if config.projection_scale != 1.0 {
        for px in proj.pixels.iter_mut() {
            px[0] *= config.projection_scale;
            px[1] *= config.projection_scale;
        }
    }

    let voxfeat = Tensor::from_f64(
        vec![embedded.len(), config.channels],
        embedded.features().to_vec(),
    )?;
    let pattern = config.patch_pattern()?;
    let f_iv = point_fusion(&upsampled, &proj.pixels, &voxfeat, config.combiner)?;
    let f_kiv = patch_fusion(&upsampled, &proj.pixels, &pattern, &voxfeat, config.combiner)?;

    let saf = SafParameters::seeded(
        pattern.k(),
        c_fused,
        Xoshiro256StarStar::stream(config.seed, STREAM_SAF).next_u64(),
    )?;
    let f_fusion = saf_infer(&f_kiv, &f_iv, &saf, config.chunk)?;
    let fused = embedded.with_features(f_fusion.to_f64_vec(), c_fused)?;

    let fb_params = FbParams::seeded(
        config.k_s,
        c_fused,
        Xoshiro256StarStar::stream(config.seed, STREAM_FB).next_u64(),
    )?;
    let opts = FbOptions {
        threshold: config.threshold,
        layout: config.score_layout,
        chunk: config.chunk,
    };
    let (fb, summary) = fb_fuse(&fused, &fb_params, &opts)?;

    let intermediates = if want_intermediates {
        let scores = score_importance(&fused, &fb_params.kernel, opts.layout)?;
        let split = split_foreground_background(&fused, &scores, opts.threshold)?;
        let expanded = expand_and_discard(&fused, &split, &scores, opts.threshold)?;
        let mut fore_mask = vec![0.0; fused.len()];
        for &row in &split.fore_rows {
            fore_mask[row] = 1.0;
        }
        Some(FuseIntermediates {
            scores: scores.to_tensor()?,
            fore_mask,
            expanded_targets: expanded.iter().map(|e| e.target).collect(),
        })
    } else {
        None
    };

    Ok(FuseOutputs {
        fused,
        fb,
        report: FuseReport {
            n_points: 0,
            n_voxels: summary.input_voxels,
            alpha: summary.alpha,
            beta: summary.beta,
            expanded: summary.expanded,
            output_voxels: summary.output_voxels,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        intermediates,
    })
}

/// Projection artifacts for the `project` command.
#[derive(Clone, Debug)]
pub struct ProjectOutputs {
    pub voxels: SparseVoxelTensor,
    pub pixels: Vec<[f64; 2]>,
    pub depths: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Voxelize and project voxel positions onto the image plane.
pub fn run_project(inputs: &SceneInputs, config: &FusionConfig) -> Result<ProjectOutputs> {
    config.validate()?;
    let spec = config.grid_spec()?;
    let flat: Vec<f64> = inputs.points.iter().flatten().copied().collect();
    let voxels = voxelize(&flat, 4, &spec, config.max_points_per_voxel)?;
    let centers = voxels.indices_to_world();
    let original = inputs.augmentation.invert(&centers);
    let full_w = inputs.features.width() * 4;
    let full_h = inputs.features.height() * 4;
    let mut proj = project_points(&original, &inputs.calib, full_w, full_h);
    if config.projection_scale != 1.0 {
        for px in proj.pixels.iter_mut() {
            px[0] *= config.projection_scale;
            px[1] *= config.projection_scale;
        }
    }
    Ok(ProjectOutputs {
        voxels,
        pixels: proj.pixels,
        depths: proj.depths,
        valid: proj.valid,
    })
}

/// Occupancy and box statistics for the `stats` command.
pub fn run_stats(inputs: &SceneInputs) -> Result<String> {
    let xyz: Vec<[f64; 3]> = inputs.points.iter().map(|p| [p[0], p[1], p[2]]).collect();
    let full_w = inputs.features.width() * 4;
    let full_h = inputs.features.height() * 4;
    let occ = occupancy(&xyz, &inputs.calib, full_w, full_h)?;
    let hist = box_point_counts(&xyz, &inputs.boxes, &inputs.difficulties)?;
    let mut out = occ.to_kv_lines();
    out.push_str(&format!("boxes: {}\n", inputs.boxes.len()));
    for d in [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard] {
        let n = inputs.difficulties.iter().filter(|&&x| x == d).count();
        out.push_str(&format!("boxes_{}: {n}\n", d.as_str()));
        out.push_str(&format!(
            "fraction_below_180_{}: {:.4}\n",
            d.as_str(),
            hist.fraction_below(180, Some(d))
        ));
    }
    Ok(out)
}

/// Box-count CSV for the `stats --csv` option.
pub fn run_stats_csv(inputs: &SceneInputs) -> Result<String> {
    let xyz: Vec<[f64; 3]> = inputs.points.iter().map(|p| [p[0], p[1], p[2]]).collect();
    let hist = box_point_counts(&xyz, &inputs.boxes, &inputs.difficulties)?;
    Ok(hist.to_csv())
}

/// Which hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Threshold,
    KOff,
    Stage,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "threshold" => Ok(SweepParam::Threshold),
            "k_off" | "koff" => Ok(SweepParam::KOff),
            "stage" => Ok(SweepParam::Stage),
            other => Err(Error::Argument(format!(
                "unknown sweep parameter '{other}' (expected T, k_off, or stage)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Threshold => "T",
            SweepParam::KOff => "k_off",
            SweepParam::Stage => "stage",
        }
    }

    /// The stock value grids: T over {0.1, ..., 0.9}, patch sizes over
    /// {9, 16, 25, 36}, stages over {1, 2, 3, 4}.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Threshold => (1..=9).map(|i| i as f64 / 10.0).collect(),
            SweepParam::KOff => vec![9.0, 16.0, 25.0, 36.0],
            SweepParam::Stage => vec![1.0, 2.0, 3.0, 4.0],
        }
    }
}

fn patch_values_for_k(k: usize) -> Result<Vec<i32>> {
    match k {
        1 => Ok(vec![0]),
        9 => Ok(vec![-1, 0, 1]),
        16 => Ok(vec![-1, 0, 1, 2]),
        25 => Ok(vec![-2, -1, 0, 1, 2]),
        36 => Ok(vec![-2, -1, 0, 1, 2, 3]),
        other => Err(Error::Argument(format!(
            "no patch pattern defined for K = {other} (supported: 1, 9, 16, 25, 36)"
        ))),
    }
}

/// Run the fuse pipeline once per value of the swept parameter and emit a
/// CSV summary (header row plus one row per value).
pub fn run_sweep(
    inputs: &SceneInputs,
    base: &FusionConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let mut csv =
        String::from("param,value,n_points,n_voxels,alpha,beta,expanded,output_voxels,wall_ms\n");
    for &v in values {
        let mut config = base.clone();
        match param {
            SweepParam::Threshold => {
                config.threshold = v;
            }
            SweepParam::KOff => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(Error::Argument(format!("bad k_off value {v}")));
                }
                config.patch_values = patch_values_for_k(v as usize)?;
            }
            SweepParam::Stage => {
                if v.fract() != 0.0 || !(1.0..=4.0).contains(&v) {
                    return Err(Error::Argument(format!("bad stage value {v}")));
                }
                config.stage = v as u32;
                config.stride = None;
            }
        }
        let out = run_fuse(inputs, &config, false)?;
        let r = out.report;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            param.name(),
            v,
            r.n_points,
            r.n_voxels,
            r.alpha,
            r.beta,
            r.expanded,
            r.output_voxels,
            r.wall_ms
        ));
    }
    Ok(csv)
}

/// Timing result of [`bench_fuse`].
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub n_voxels: usize,
    pub k: usize,
    pub channels: usize,
    pub chunk: usize,
    pub elapsed_ms: [f64; 2],
    pub deterministic: bool,
    pub output_voxels: usize,
}

impl BenchReport {
    pub fn to_kv_lines(&self) -> String {
        format!(
            "n_voxels: {}\nk: {}\nchannels: {}\nchunk: {}\nrun1_ms: {:.1}\nrun2_ms: {:.1}\noutput_voxels: {}\ndeterministic: {}\n",
            self.n_voxels,
            self.k,
            self.channels,
            self.chunk,
            self.elapsed_ms[0],
            self.elapsed_ms[1],
            self.output_voxels,
            self.deterministic
        )
    }
}

/// Run the post-voxelization fuse pipeline twice on a scene-derived voxel
/// set of exactly `n` voxels and report wall time plus a bit-level
/// determinism check between the runs.
///
/// The fixture is a dense ray-cast scene, voxelized and trimmed to `n`
/// rows: voxels cluster on surfaces the way captured LiDAR does, which is
/// the workload the expansion stage is shaped by (isolated uniform-random
/// voxels would multiply the densified set far beyond any real frame).
pub fn bench_fuse(n: usize, k_off: usize, channels: usize, chunk: usize, seed: u64) -> Result<BenchReport> {
    let mut config = FusionConfig {
        channels,
        chunk: Some(chunk),
        seed,
        ..FusionConfig::default()
    };
    config.patch_values = patch_values_for_k(k_off)?;
    config.validate()?;
    let spec = config.grid_spec()?;

    // enough rays that voxelization comfortably exceeds n rows
    let mut scene_spec = crate::scenegen::SceneSpec {
        seed,
        object_count: 12,
        ..crate::scenegen::SceneSpec::default()
    };
    scene_spec.beams.azimuth_min_deg = -60.0;
    scene_spec.beams.azimuth_max_deg = 60.0;
    scene_spec.beams.azimuth_step_deg =
        (120.0 * scene_spec.beams.vertical_beams as f64 / (2.5 * n as f64)).min(0.2);
    let scene = crate::scenegen::generate_scene(&scene_spec)?;
    let flat: Vec<f64> = scene.points.iter().flatten().copied().collect();
    let full = voxelize(&flat, 4, &spec, config.max_points_per_voxel)?;
    if full.len() < n {
        return Err(Error::Argument(format!(
            "bench scene yields {} voxels, fewer than the requested {n}",
            full.len()
        )));
    }
    let indices = full.indices()[..n].to_vec();
    let attrs = full.features()[..n * full.channels()].to_vec();
    let voxels = SparseVoxelTensor::new(spec, indices, attrs, full.channels())?;

    let features = crate::scenegen::generate_feature_map(&scene_spec, channels)?;
    let calib = scene.calib.clone();
    let augmentation = AugmentationRecord::empty();

    let run = || -> Result<(FuseOutputs, f64)> {
        let start = Instant::now();
        let out = fuse_voxels(&voxels, &calib, &features, &augmentation, &config, false)?;
        Ok((out, start.elapsed().as_secs_f64() * 1e3))
    };
    let (a, ms_a) = run()?;
    let (b, ms_b) = run()?;
    let deterministic = a.fb.indices() == b.fb.indices()
        && a.fb
            .features()
            .iter()
            .zip(b.fb.features())
            .all(|(x, y)| x.to_bits() == y.to_bits())
        && a.fused
            .features()
            .iter()
            .zip(b.fused.features())
            .all(|(x, y)| x.to_bits() == y.to_bits());

    Ok(BenchReport {
        n_voxels: n,
        k: k_off,
        channels,
        chunk,
        elapsed_ms: [ms_a, ms_b],
        deterministic,
        output_voxels: a.fb.len(),
    })
}
