//! Crop/pad planning, padding fraction, hierarchical token-grid arithmetic and
//! an analytic encoder compute estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{linear_index, voxel_count, MaskVolume, Shape3, Volume};

/// Backbone geometry profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Smit,
    SwinUnetr,
}

impl Profile {
    pub fn patch(self) -> [usize; 3] {
        [2, 2, 2]
    }

    pub fn window(self) -> [usize; 3] {
        match self {
            Profile::Smit => [4; 3],
            Profile::SwinUnetr => [7; 3],
        }
    }

    pub fn cubic_crop(self) -> Shape3 {
        match self {
            Profile::Smit => [128; 3],
            Profile::SwinUnetr => [96; 3],
        }
    }

    /// Anisotropic crop shared by both backbones.
    pub fn act_crop(self) -> Shape3 {
        [128, 128, 64]
    }

    pub fn embed_dim(self) -> usize {
        48
    }

    pub fn depths(self) -> [usize; 4] {
        [2, 2, 2, 2]
    }

    pub fn heads(self) -> [usize; 4] {
        [3, 6, 12, 24]
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Smit => "smit",
            Profile::SwinUnetr => "swinunetr",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "smit" => Ok(Profile::Smit),
            "swinunetr" | "swin-unetr" | "swin_unetr" => Ok(Profile::SwinUnetr),
            other => Err(Error::invalid(format!("unknown profile {other:?}"))),
        }
    }
}

/// Parses `128x128x64` (or a single `96` for a cube).
pub fn parse_dims(s: &str) -> Result<Shape3> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("cannot parse dimensions {s:?}")))?;
    match nums.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::invalid(format!("expected AxBxC, got {s:?}"))),
    }
}

/// `max(1 - L/C, 0)`.
pub fn padding_fraction(native: usize, crop: usize) -> Result<f64> {
    if native == 0 || crop == 0 {
        return Err(Error::invalid(format!(
            "padding_fraction needs L >= 1 and C >= 1, got L={native}, C={crop}"
        )));
    }
    Ok((1.0 - native as f64 / crop as f64).max(0.0))
}

/// Target input geometry. Each axis is independently centre-padded (when the
/// volume is shorter) or centre-cropped (when longer); odd remainders put the
/// extra voxel on the high side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub crop: Shape3,
    pub pad_value: f32,
}

/// What happens along one axis when a plan is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisFit {
    /// `low` voxels before and `high` after the native extent.
    Pad { low: usize, high: usize },
    /// Keep native voxels `start .. start + crop`.
    Crop { start: usize },
}

impl CropPlan {
    pub fn new(crop: Shape3) -> Result<Self> {
        if crop.iter().any(|&c| c == 0) {
            return Err(Error::invalid(format!("crop dims must be positive, got {crop:?}")));
        }
        Ok(Self {
            crop,
            pad_value: 0.0,
        })
    }

    /// A plan restricted to the crops a profile supports (its cubic crop or
    /// the anisotropic 128x128x64 crop).
    pub fn for_profile(profile: Profile, crop: Shape3) -> Result<Self> {
        if crop != profile.cubic_crop() && crop != profile.act_crop() {
            return Err(Error::invalid(format!(
                "crop {crop:?} is not valid for profile {}; expected {:?} or {:?}",
                profile.name(),
                profile.cubic_crop(),
                profile.act_crop()
            )));
        }
        Self::new(crop)
    }

    pub fn axis_fit(&self, native: usize, axis: usize) -> AxisFit {
        let c = self.crop[axis];
        if native <= c {
            let total = c - native;
            AxisFit::Pad {
                low: total / 2,
                high: total - total / 2,
            }
        } else {
            AxisFit::Crop {
                start: (native - c) / 2,
            }
        }
    }

    /// Maps an output coordinate along `axis` to the native coordinate, or
    /// `None` when it falls in padding.
    fn source_index(&self, native: usize, axis: usize, out: usize) -> Option<usize> {
        match self.axis_fit(native, axis) {
            AxisFit::Pad { low, .. } => {
                if out >= low && out < low + native {
                    Some(out - low)
                } else {
                    None
                }
            }
            AxisFit::Crop { start } => Some(start + out),
        }
    }

    fn gather<T: Copy>(&self, shape: Shape3, src: &[T], fill: T) -> (Vec<T>, Vec<u8>) {
        let n = voxel_count(self.crop);
        let mut out = Vec::with_capacity(n);
        let mut real = Vec::with_capacity(n);
        let maps: Vec<Vec<Option<usize>>> = (0..3)
            .map(|a| {
                (0..self.crop[a])
                    .map(|o| self.source_index(shape[a], a, o))
                    .collect()
            })
            .collect();
        for z in &maps[2] {
            for y in &maps[1] {
                for x in &maps[0] {
                    match (x, y, z) {
                        (Some(x), Some(y), Some(z)) => {
                            out.push(src[linear_index(shape, *x, *y, *z)]);
                            real.push(1);
                        }
                        _ => {
                            out.push(fill);
                            real.push(0);
                        }
                    }
                }
            }
        }
        (out, real)
    }

    /// Applies the plan, returning the fitted volume and its real-voxel
    /// indicator (1 = native voxel, 0 = padding).
    pub fn apply(&self, v: &Volume) -> (Volume, MaskVolume) {
        let (data, real) = self.gather(v.shape, &v.data, self.pad_value);
        (
            Volume {
                shape: self.crop,
                spacing_mm: v.spacing_mm,
                data,
            },
            MaskVolume {
                shape: self.crop,
                spacing_mm: v.spacing_mm,
                data: real,
            },
        )
    }

    /// Applies the same placement to a mask (padding is 0).
    pub fn apply_mask(&self, m: &MaskVolume) -> MaskVolume {
        let (data, _) = self.gather(m.shape, &m.data, 0u8);
        MaskVolume {
            shape: self.crop,
            spacing_mm: m.spacing_mm,
            data,
        }
    }
}

pub fn apply_crop(v: &Volume, plan: &CropPlan) -> (Volume, MaskVolume) {
    plan.apply(v)
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Token geometry of one encoder stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBudget {
    pub stage: usize,
    pub extent: [usize; 3],
    pub tokens: usize,
    /// Window clamped to the feature extent per axis.
    pub effective_window: [usize; 3],
    /// Shift used by odd blocks (0 along axes that fit in one window).
    pub shift: [usize; 3],
    /// Extents rounded up to multiples of the effective window.
    pub padded_extent: [usize; 3],
    pub padded_tokens: usize,
    pub windows: usize,
    /// `1 - tokens / padded_tokens`.
    pub window_pad_fraction: f64,
    /// Window-boundary padding per axis, in tokens.
    pub axis_window_pad: [usize; 3],
}

/// Hierarchical token grid for a crop/patch/window triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub crop: Shape3,
    pub patch: [usize; 3],
    pub window: [usize; 3],
    pub n_stages: usize,
    pub stages: Vec<StageBudget>,
}

impl TokenGrid {
    pub fn stage0_tokens(&self) -> usize {
        self.stages[0].tokens
    }
}

/// Geometry of a single stage with the given extent.
pub fn stage_budget(stage: usize, extent: [usize; 3], window: [usize; 3]) -> StageBudget {
    let mut eff = [0; 3];
    let mut shift = [0; 3];
    let mut padded = [0; 3];
    let mut axis_pad = [0; 3];
    for a in 0..3 {
        if extent[a] <= window[a] {
            eff[a] = extent[a];
            shift[a] = 0;
        } else {
            eff[a] = window[a];
            shift[a] = window[a] / 2;
        }
        padded[a] = ceil_div(extent[a], eff[a]) * eff[a];
        axis_pad[a] = padded[a] - extent[a];
    }
    let tokens = voxel_count(extent);
    let padded_tokens = voxel_count(padded);
    StageBudget {
        stage,
        extent,
        tokens,
        effective_window: eff,
        shift,
        padded_extent: padded,
        padded_tokens,
        windows: (0..3).map(|a| padded[a] / eff[a]).product(),
        window_pad_fraction: 1.0 - tokens as f64 / padded_tokens as f64,
        axis_window_pad: axis_pad,
    }
}

/// Per-stage token extents, counts, effective windows and window-boundary
/// padding. Stage 0 is `ceil(crop / patch)`; each later stage halves (ceil).
pub fn token_budget(crop: Shape3, patch: [usize; 3], window: [usize; 3], n_stages: usize) -> Result<TokenGrid> {
    if patch.iter().chain(window.iter()).any(|&v| v == 0) || crop.iter().any(|&c| c == 0) {
        return Err(Error::invalid("crop, patch and window must be positive"));
    }
    if n_stages == 0 {
        return Err(Error::invalid("need at least one stage"));
    }
    let mut extent = [0; 3];
    for a in 0..3 {
        extent[a] = ceil_div(crop[a], patch[a]);
    }
    let mut stages = Vec::with_capacity(n_stages);
    for s in 0..n_stages {
        stages.push(stage_budget(s, extent, window));
        for e in extent.iter_mut() {
            *e = ceil_div(*e, 2);
        }
    }
    Ok(TokenGrid {
        crop,
        patch,
        window,
        n_stages,
        stages,
    })
}

/// Multiply-accumulate counts for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCompute {
    pub stage: usize,
    pub dim: usize,
    pub blocks: usize,
    /// qkv + output projections, over window-padded tokens.
    pub projection_macs: f64,
    /// QK^T and attention-weighted values, over window-padded tokens.
    pub attention_macs: f64,
    pub mlp_macs: f64,
    /// Patch embedding (stage 0) or patch merging into this stage.
    pub embed_or_merge_macs: f64,
    pub total_macs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeEstimate {
    pub stages: Vec<StageCompute>,
    pub total_macs: f64,
    pub assumptions: Vec<String>,
}

impl ComputeEstimate {
    pub fn ratio_to(&self, baseline: &ComputeEstimate) -> f64 {
        self.total_macs / baseline.total_macs
    }
}

pub fn compute_assumptions() -> Vec<String> {
    vec![
        "encoder only; decoder, skip connections and normalisation layers are not counted".into(),
        "multiply-accumulates (MACs), one per weight use; FLOPs ~= 2 x MACs".into(),
        "qkv (3C^2), output projection (C^2) and attention (2 n_w C) are counted on window-padded tokens".into(),
        "MLP (2 r C^2) counted on unpadded tokens".into(),
        "patch embedding: prod(patch) x C per token; patch merging: 8C x 2C per merged token".into(),
        "stage s width C = embed_dim * 2^s; relative position bias ignored".into(),
    ]
}

/// Deterministic analytic MAC count of the hierarchical encoder.
pub fn compute_estimate(
    grid: &TokenGrid,
    embed_dim: usize,
    depths: &[usize],
    mlp_ratio: f64,
) -> Result<ComputeEstimate> {
    if depths.len() < grid.stages.len() {
        return Err(Error::invalid("need one depth per stage"));
    }
    let mut stages = Vec::new();
    let mut total = 0.0;
    let in_channels = 1.0;
    for (s, sb) in grid.stages.iter().enumerate() {
        let c = (embed_dim << s) as f64;
        let blocks = depths[s];
        let n = sb.tokens as f64;
        let np = sb.padded_tokens as f64;
        let nw = voxel_count(sb.effective_window) as f64;
        let projection = blocks as f64 * np * 4.0 * c * c;
        let attention = blocks as f64 * np * 2.0 * nw * c;
        let mlp = blocks as f64 * n * 2.0 * mlp_ratio * c * c;
        let embed_or_merge = if s == 0 {
            n * voxel_count(grid.patch) as f64 * in_channels * c
        } else {
            let prev_c = c / 2.0;
            n * 8.0 * prev_c * c
        };
        let t = projection + attention + mlp + embed_or_merge;
        total += t;
        stages.push(StageCompute {
            stage: s,
            dim: c as usize,
            blocks,
            projection_macs: projection,
            attention_macs: attention,
            mlp_macs: mlp,
            embed_or_merge_macs: embed_or_merge,
            total_macs: t,
        });
    }
    Ok(ComputeEstimate {
        stages,
        total_macs: total,
        assumptions: compute_assumptions(),
    })
}
