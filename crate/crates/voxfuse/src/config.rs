//! Pipeline configuration: every tunable of the fusion stages with the
//! stock defaults, a dotted key-value text format, and derived helpers.
//!
//! Defaults: voxel size (0.05, 0.05, 0.1) m over x in [0, 70.4], y in
//! [-40, 40], z in [-3, 1]; a 3x3 patch (`[-1, 0, 1]^2`, K = 9); scoring
//! kernel size 3; importance threshold 0.5; 16 channels; fusion attached
//! at stage 1. Stage `s` implies voxel stride `2^(s-1)` unless
//! `voxel.stride` pins it explicitly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fbfusion::ScoreLayout;
use crate::p2fusion::{Combiner, PatchPattern};
use crate::voxelgrid::VoxelGridSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub voxel_size: [f64; 3],
    pub pc_range_min: [f64; 3],
    pub pc_range_max: [f64; 3],
    /// Explicit voxel stride; None derives it from the stage.
    pub stride: Option<u32>,
    pub voxel_center_offset: bool,
    pub max_points_per_voxel: usize,
    /// Values whose Cartesian square forms the patch offsets.
    pub patch_values: Vec<i32>,
    pub k_s: usize,
    pub threshold: f64,
    pub channels: usize,
    pub stage: u32,
    pub combiner: Combiner,
    /// Attention chunk size; None = full attention. The default is chunked:
    /// full attention is quadratic in the voxel count and the densified
    /// foreground stage routinely exceeds memory with it at scene scale.
    pub chunk: Option<usize>,
    pub score_layout: ScoreLayout,
    pub seed: u64,
    /// Pixel scale applied after perspective division.
    pub projection_scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            voxel_size: [0.05, 0.05, 0.1],
            pc_range_min: [0.0, -40.0, -3.0],
            pc_range_max: [70.4, 40.0, 1.0],
            stride: None,
            voxel_center_offset: false,
            max_points_per_voxel: 5,
            patch_values: vec![-1, 0, 1],
            k_s: 3,
            threshold: 0.5,
            channels: 16,
            stage: 1,
            combiner: Combiner::Add,
            chunk: Some(1024),
            score_layout: ScoreLayout::ExpandThenCenter,
            seed: 42,
            projection_scale: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Argument(format!(
                "fusion.threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.channels == 0 {
            return Err(Error::Argument("fusion.channels must be >= 1".into()));
        }
        if self.k_s == 0 || self.k_s % 2 == 0 {
            return Err(Error::Argument(format!(
                "fusion.k_s must be odd, got {}",
                self.k_s
            )));
        }
        if !(1..=4).contains(&self.stage) {
            return Err(Error::Argument(format!(
                "fusion.stage must be 1..4, got {}",
                self.stage
            )));
        }
        if self.max_points_per_voxel == 0 {
            return Err(Error::Argument("voxel.max_points must be >= 1".into()));
        }
        if self.chunk == Some(0) {
            return Err(Error::Argument("fusion.chunk must be >= 1 or 'full'".into()));
        }
        if !(self.projection_scale > 0.0) {
            return Err(Error::Argument("projection.scale must be > 0".into()));
        }
        self.patch_pattern()?;
        self.grid_spec()?;
        Ok(())
    }

    /// Explicit stride, or `2^(stage-1)` — deeper stages halve resolution.
    pub fn effective_stride(&self) -> u32 {
        self.stride.unwrap_or(1 << (self.stage - 1))
    }

    pub fn grid_spec(&self) -> Result<VoxelGridSpec> {
        let mut spec = VoxelGridSpec::new(
            self.voxel_size,
            self.pc_range_min,
            self.pc_range_max,
            self.effective_stride(),
        )?;
        spec.center_offset = self.voxel_center_offset;
        Ok(spec)
    }

    pub fn patch_pattern(&self) -> Result<PatchPattern> {
        PatchPattern::square(&self.patch_values)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse_str(&text)
    }

    /// Parse the key-value format: one `section.key = value` per line,
    /// `#` comments. Unknown keys are rejected. Missing keys keep their
    /// defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected key = value", lineno + 1))
            })?;
            config.apply_kv(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply one key-value override (also used for CLI flag overrides).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad_num = |k: &str, v: &str| Error::Parse(format!("config: bad number '{v}' for {k}"));
        match key {
            "voxel.size" => self.voxel_size = parse_vec3(key, value)?,
            "voxel.range_min" => self.pc_range_min = parse_vec3(key, value)?,
            "voxel.range_max" => self.pc_range_max = parse_vec3(key, value)?,
            "voxel.stride" => {
                self.stride = match value {
                    "auto" => None,
                    v => Some(v.parse().map_err(|_| bad_num(key, v))?),
                }
            }
            "voxel.center_offset" => self.voxel_center_offset = parse_bool(key, value)?,
            "voxel.max_points" => {
                self.max_points_per_voxel = value.parse().map_err(|_| bad_num(key, value))?
            }
            "fusion.patch" => {
                let mut vals = Vec::new();
                for tok in value.split_whitespace() {
                    vals.push(tok.parse().map_err(|_| bad_num(key, tok))?);
                }
                self.patch_values = vals;
            }
            "fusion.k_s" => self.k_s = value.parse().map_err(|_| bad_num(key, value))?,
            "fusion.threshold" => {
                self.threshold = value.parse().map_err(|_| bad_num(key, value))?
            }
            "fusion.channels" => self.channels = value.parse().map_err(|_| bad_num(key, value))?,
            "fusion.stage" => self.stage = value.parse().map_err(|_| bad_num(key, value))?,
            "fusion.combiner" => {
                self.combiner = match value {
                    "add" => Combiner::Add,
                    "concat" => Combiner::Concat,
                    other => {
                        return Err(Error::Parse(format!(
                            "config: fusion.combiner must be add or concat, got '{other}'"
                        )))
                    }
                }
            }
            "fusion.chunk" => {
                self.chunk = match value {
                    "full" => None,
                    v => Some(v.parse().map_err(|_| bad_num(key, v))?),
                }
            }
            "fusion.score_layout" => {
                self.score_layout = match value {
                    "expand_center" => ScoreLayout::ExpandThenCenter,
                    "center_expand" => ScoreLayout::CenterThenExpand,
                    other => {
                        return Err(Error::Parse(format!(
                            "config: fusion.score_layout must be expand_center or center_expand, got '{other}'"
                        )))
                    }
                }
            }
            "fusion.seed" => self.seed = value.parse().map_err(|_| bad_num(key, value))?,
            "projection.scale" => {
                self.projection_scale = value.parse().map_err(|_| bad_num(key, value))?
            }
            other => return Err(Error::Parse(format!("config: unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Render back to the text format (parses to an equal config).
    pub fn to_text(&self) -> String {
        let vec3 = |v: &[f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
        let mut out = String::new();
        out.push_str(&format!("voxel.size = {}\n", vec3(&self.voxel_size)));
        out.push_str(&format!("voxel.range_min = {}\n", vec3(&self.pc_range_min)));
        out.push_str(&format!("voxel.range_max = {}\n", vec3(&self.pc_range_max)));
        match self.stride {
            Some(s) => out.push_str(&format!("voxel.stride = {s}\n")),
            None => out.push_str("voxel.stride = auto\n"),
        }
        out.push_str(&format!("voxel.center_offset = {}\n", self.voxel_center_offset));
        out.push_str(&format!("voxel.max_points = {}\n", self.max_points_per_voxel));
        let patch: Vec<String> = self.patch_values.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("fusion.patch = {}\n", patch.join(" ")));
        out.push_str(&format!("fusion.k_s = {}\n", self.k_s));
        out.push_str(&format!("fusion.threshold = {}\n", self.threshold));
        out.push_str(&format!("fusion.channels = {}\n", self.channels));
        out.push_str(&format!("fusion.stage = {}\n", self.stage));
        out.push_str(&format!(
            "fusion.combiner = {}\n",
            match self.combiner {
                Combiner::Add => "add",
                Combiner::Concat => "concat",
            }
        ));
        match self.chunk {
            Some(c) => out.push_str(&format!("fusion.chunk = {c}\n")),
            None => out.push_str("fusion.chunk = full\n"),
        }
        out.push_str(&format!(
            "fusion.score_layout = {}\n",
            match self.score_layout {
                ScoreLayout::ExpandThenCenter => "expand_center",
                ScoreLayout::CenterThenExpand => "center_expand",
            }
        ));
        out.push_str(&format!("fusion.seed = {}\n", self.seed));
        out.push_str(&format!("projection.scale = {}\n", self.projection_scale));
        out
    }
}

fn parse_vec3(key: &str, value: &str) -> Result<[f64; 3]> {
    let toks: Vec<&str> = value.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(Error::Parse(format!(
            "config: {key} wants 3 values, got {}",
            toks.len()
        )));
    }
    let mut out = [0.0; 3];
    for (i, tok) in toks.iter().enumerate() {
        out[i] = tok
            .parse()
            .map_err(|_| Error::Parse(format!("config: bad number '{tok}' for {key}")))?;
    }
    Ok(out)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Parse(format!(
            "config: {key} must be true or false, got '{other}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stock_settings() {
        let c = FusionConfig::default();
        assert_eq!(c.voxel_size, [0.05, 0.05, 0.1]);
        assert_eq!(c.patch_values, vec![-1, 0, 1]);
        assert_eq!(c.patch_pattern().unwrap().k(), 9);
        assert_eq!(c.k_s, 3);
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.channels, 16);
        assert_eq!(c.stage, 1);
        assert_eq!(c.effective_stride(), 1);
        assert_eq!(c.combiner, Combiner::Add);
        c.validate().unwrap();
    }

    #[test]
    fn stage_drives_stride_unless_pinned() {
        let mut c = FusionConfig::default();
        for (stage, want) in [(1u32, 1u32), (2, 2), (3, 4), (4, 8)] {
            c.stage = stage;
            assert_eq!(c.effective_stride(), want);
        }
        c.stride = Some(3);
        assert_eq!(c.effective_stride(), 3);
    }

    #[test]
    fn text_roundtrip() {
        let mut c = FusionConfig::default();
        c.threshold = 0.3;
        c.chunk = Some(512);
        c.patch_values = vec![-2, -1, 0, 1, 2];
        c.stage = 2;
        c.combiner = Combiner::Concat;
        c.voxel_center_offset = true;
        let back = FusionConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "\
            # comment\n\
            fusion.threshold = 0.7\n\
            fusion.chunk = 128  # inline comment\n\
            voxel.size = 0.1 0.1 0.2\n";
        let c = FusionConfig::parse_str(text).unwrap();
        assert_eq!(c.threshold, 0.7);
        assert_eq!(c.chunk, Some(128));
        assert_eq!(c.voxel_size, [0.1, 0.1, 0.2]);
        // untouched keys keep defaults
        assert_eq!(c.channels, 16);
    }

    #[test]
    fn bad_inputs_are_parse_errors() {
        assert!(FusionConfig::parse_str("nonsense\n").is_err());
        assert!(FusionConfig::parse_str("no.such.key = 1\n").is_err());
        assert!(FusionConfig::parse_str("fusion.threshold = maybe\n").is_err());
        assert!(FusionConfig::parse_str("voxel.size = 1 2\n").is_err());
        assert!(FusionConfig::parse_str("fusion.threshold = 1.5\n").is_err());
        assert!(FusionConfig::parse_str("fusion.k_s = 4\n").is_err());
        assert!(FusionConfig::parse_str("fusion.stage = 9\n").is_err());
    }

    #[test]
    fn grid_spec_carries_stride_and_offset() {
        let mut c = FusionConfig::default();
        c.stage = 3;
        c.voxel_center_offset = true;
        let spec = c.grid_spec().unwrap();
        assert_eq!(spec.stride, 4);
        assert!(spec.center_offset);
    }
}
