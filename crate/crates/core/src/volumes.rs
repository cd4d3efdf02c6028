//! Scalar volumes, binary masks, the RVOL on-disk format, cohort manifests and
//! intensity/spacing preprocessing.
//!
//! Voxel data is stored in x-fastest linear order:
//! `index = x + nx * (y + ny * z)`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];

#[inline]
pub fn linear_index(shape: Shape3, x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

#[inline]
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

fn check_geometry(shape: Shape3, spacing_mm: [f64; 3], len: usize) -> Result<()> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::invalid(format!("shape must be positive, got {shape:?}")));
    }
    if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "spacing must be strictly positive, got {spacing_mm:?}"
        )));
    }
    if len != voxel_count(shape) {
        return Err(Error::PayloadSize {
            expected: voxel_count(shape),
            found: len,
        });
    }
    Ok(())
}

/// A 3D scalar field with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: Shape3,
    pub spacing_mm: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(shape, spacing_mm, data.len())?;
        Ok(Self {
            shape,
            spacing_mm,
            data,
        })
    }

    pub fn filled(shape: Shape3, spacing_mm: [f64; 3], value: f32) -> Result<Self> {
        Self::new(shape, spacing_mm, vec![value; voxel_count(shape)])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.shape, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = linear_index(self.shape, x, y, z);
        self.data[i] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_grid(&self, mask: &MaskVolume) -> bool {
        self.shape == mask.shape && self.spacing_mm == mask.spacing_mm
    }
}

/// Binary mask on a voxel grid. Values are 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub shape: Shape3,
    pub spacing_mm: [f64; 3],
    pub data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(shape: Shape3, spacing_mm: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_geometry(shape, spacing_mm, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            shape,
            spacing_mm,
            data,
        })
    }

    pub fn empty(shape: Shape3, spacing_mm: [f64; 3]) -> Result<Self> {
        Self::new(shape, spacing_mm, vec![0; voxel_count(shape)])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear_index(self.shape, x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = linear_index(self.shape, x, y, z);
        self.data[i] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    pub fn same_grid(&self, other: &MaskVolume) -> bool {
        self.shape == other.shape && self.spacing_mm == other.spacing_mm
    }

    /// Thresholds a scalar volume at `> 0.5`.
    pub fn from_volume(v: &Volume) -> Self {
        Self {
            shape: v.shape,
            spacing_mm: v.spacing_mm,
            data: v.data.iter().map(|&x| (x > 0.5) as u8).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            shape: self.shape,
            spacing_mm: self.spacing_mm,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// RVOL format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
}

/// JSON header stored as `<name>.rvol.json` next to the `<name>.rvol.f32` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvolHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
    pub kind: VolumeKind,
}

pub const RVOL_HEADER_EXT: &str = ".rvol.json";
pub const RVOL_PAYLOAD_EXT: &str = ".rvol.f32";

/// Splits any of `<name>`, `<name>.rvol.json` or `<name>.rvol.f32` into the
/// header and payload paths.
pub fn rvol_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(RVOL_HEADER_EXT)
        .or_else(|| s.strip_suffix(RVOL_PAYLOAD_EXT))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}{RVOL_HEADER_EXT}")),
        PathBuf::from(format!("{stem}{RVOL_PAYLOAD_EXT}")),
    )
}

fn write_rvol(
    path: &Path,
    shape: Shape3,
    spacing_mm: [f64; 3],
    kind: VolumeKind,
    values: impl Iterator<Item = f32>,
) -> Result<PathBuf> {
    let (hp, pp) = rvol_paths(path);
    if let Some(parent) = hp.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header = RvolHeader {
        shape,
        spacing_mm,
        dtype: "f32le".into(),
        order: "x-fastest".into(),
        kind,
    };
    fs::write(&hp, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&hp, e))?;
    let mut bytes = Vec::with_capacity(voxel_count(shape) * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&pp, bytes).map_err(|e| Error::io(&pp, e))?;
    Ok(hp)
}

fn read_rvol(path: &Path) -> Result<(RvolHeader, Vec<f32>)> {
    let (hp, pp) = rvol_paths(path);
    let text = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: RvolHeader = serde_json::from_slice(&text).map_err(|e| Error::Header {
        path: hp.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != "f32le" {
        return Err(Error::Header {
            path: hp,
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    if header.order != "x-fastest" {
        return Err(Error::Header {
            path: hp,
            reason: format!("unsupported order {:?}", header.order),
        });
    }
    let raw = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    if raw.len() % 4 != 0 {
        return Err(Error::PayloadSize {
            expected: voxel_count(header.shape),
            found: raw.len() / 4,
        });
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_geometry(header.shape, header.spacing_mm, data.len())?;
    Ok((header, data))
}

/// Writes `<path>.rvol.json` + `<path>.rvol.f32`; returns the header path.
pub fn save_volume(v: &Volume, path: &Path) -> Result<PathBuf> {
    write_rvol(path, v.shape, v.spacing_mm, VolumeKind::Image, v.data.iter().copied())
}

pub fn save_mask(m: &MaskVolume, path: &Path) -> Result<PathBuf> {
    write_rvol(
        path,
        m.shape,
        m.spacing_mm,
        VolumeKind::Mask,
        m.data.iter().map(|&v| v as f32),
    )
}

/// Loads the stored values exactly; no resampling or normalization.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (h, data) = read_rvol(path)?;
    Volume::new(h.shape, h.spacing_mm, data)
}

/// Loads a mask; any stored value other than 0 or 1 is rejected.
pub fn load_mask(path: &Path) -> Result<MaskVolume> {
    let (h, data) = read_rvol(path)?;
    let mut out = Vec::with_capacity(data.len());
    for v in data {
        if v == 0.0 {
            out.push(0);
        } else if v == 1.0 {
            out.push(1);
        } else {
            return Err(Error::Header {
                path: path.to_path_buf(),
                reason: format!("non-binary mask value {v}"),
            });
        }
    }
    MaskVolume::new(h.shape, h.spacing_mm, out)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subtype {
    B,
    D,
}

impl std::fmt::Display for Subtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subtype::B => "B",
            Subtype::D => "D",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    /// z-extent in voxels of the stored (resampled, uncropped) volume.
    pub native_z_extent: usize,
    #[serde(default)]
    pub subtype: Option<Subtype>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CohortManifest {
    pub cohort_id: String,
    pub scans: Vec<ScanRecord>,
    /// configuration name -> scan_id -> predicted mask path
    #[serde(default)]
    pub predictions: BTreeMap<String, BTreeMap<String, PathBuf>>,
    /// Directory relative paths are resolved against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn image_path(&self, scan: &ScanRecord) -> PathBuf {
        self.resolve(&scan.image_path)
    }

    pub fn mask_path(&self, scan: &ScanRecord) -> PathBuf {
        self.resolve(&scan.mask_path)
    }

    pub fn prediction_path(&self, config: &str, scan_id: &str) -> Option<PathBuf> {
        self.predictions
            .get(config)
            .and_then(|m| m.get(scan_id))
            .map(|p| self.resolve(p))
    }

    /// Checks id uniqueness and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.scans {
            if !seen.insert(s.scan_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate scan_id {:?}", s.scan_id)));
            }
            for p in [self.image_path(s), self.mask_path(s)] {
                let (hp, pp) = rvol_paths(&p);
                if !hp.exists() || !pp.exists() {
                    return Err(Error::Manifest(format!(
                        "scan {:?}: missing file {}",
                        s.scan_id,
                        p.display()
                    )));
                }
            }
        }
        for (cfg, preds) in &self.predictions {
            for (id, p) in preds {
                if !seen.contains(id.as_str()) {
                    return Err(Error::Manifest(format!(
                        "prediction config {cfg:?} references unknown scan {id:?}"
                    )));
                }
                let (hp, _) = rvol_paths(&self.resolve(p));
                if !hp.exists() {
                    return Err(Error::Manifest(format!(
                        "prediction config {cfg:?}, scan {id:?}: missing file {}",
                        hp.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: CohortManifest = serde_json::from_slice(&text).map_err(|e| Error::Header {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Empirical percentile of `values` using the lower-rank estimator:
/// `sorted[floor(q/100 * (n-1))]`.
pub fn percentile_lower(values: &[f32], q: f64) -> f32 {
    assert!(!values.is_empty());
    let mut v: Vec<f32> = values.to_vec();
    let rank = ((q / 100.0) * (v.len() - 1) as f64).floor() as usize;
    let rank = rank.min(v.len() - 1);
    let (_, kth, _) = v.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    *kth
}

pub const CLIP_PERCENTILE: f64 = 99.0;

/// Clips at the volume's 99th-percentile intensity, then min-max scales the
/// clipped volume to [0, 1].
pub fn preprocess(v: &Volume) -> Result<Volume> {
    if v.data.is_empty() {
        return Err(Error::invalid("empty volume"));
    }
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("volume contains non-finite values"));
    }
    let hi = percentile_lower(&v.data, CLIP_PERCENTILE);
    let lo = v.data.iter().copied().fold(f32::INFINITY, f32::min);
    let range = (hi as f64) - (lo as f64);
    if range <= 0.0 {
        return Err(Error::DegenerateRange);
    }
    let data = v
        .data
        .iter()
        .map(|&x| {
            let c = (x.min(hi) as f64 - lo as f64) / range;
            c.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Volume {
        shape: v.shape,
        spacing_mm: v.spacing_mm,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Resamples onto an isotropic `target_mm` grid sharing the first voxel
/// centre with the input. Positions past the last input voxel take the edge
/// value.
pub fn resample_isotropic(v: &Volume, target_mm: f64, mode: Interpolation) -> Result<Volume> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(Error::invalid(format!("target spacing must be > 0, got {target_mm}")));
    }
    let mut out_shape = [0usize; 3];
    for a in 0..3 {
        out_shape[a] = (v.shape[a] as f64 * v.spacing_mm[a] / target_mm).round() as usize;
        if out_shape[a] == 0 {
            return Err(Error::invalid(format!("resampled shape is zero along axis {a}")));
        }
    }
    // Per-axis source coordinates and interpolation weights.
    let axis_taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            let last = v.shape[a] - 1;
            (0..out_shape[a])
                .map(|o| {
                    let src = (o as f64 * target_mm / v.spacing_mm[a]).min(last as f64);
                    match mode {
                        Interpolation::Nearest => {
                            let i = (src.round() as usize).min(last);
                            (i, i, 0.0)
                        }
                        Interpolation::Linear => {
                            let i0 = src.floor() as usize;
                            let i1 = (i0 + 1).min(last);
                            (i0, i1, src - i0 as f64)
                        }
                    }
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(voxel_count(out_shape));
    for &(z0, z1, tz) in &axis_taps[2] {
        for &(y0, y1, ty) in &axis_taps[1] {
            for &(x0, x1, tx) in &axis_taps[0] {
                let val = match mode {
                    Interpolation::Nearest => v.get(x0, y0, z0),
                    Interpolation::Linear => {
                        let g = |x, y, z| v.get(x, y, z) as f64;
                        let c00 = g(x0, y0, z0) * (1.0 - tx) + g(x1, y0, z0) * tx;
                        let c10 = g(x0, y1, z0) * (1.0 - tx) + g(x1, y1, z0) * tx;
                        let c01 = g(x0, y0, z1) * (1.0 - tx) + g(x1, y0, z1) * tx;
                        let c11 = g(x0, y1, z1) * (1.0 - tx) + g(x1, y1, z1) * tx;
                        let c0 = c00 * (1.0 - ty) + c10 * ty;
                        let c1 = c01 * (1.0 - ty) + c11 * ty;
                        (c0 * (1.0 - tz) + c1 * tz) as f32
                    }
                };
                data.push(val);
            }
        }
    }
    Volume::new(out_shape, [target_mm; 3], data)
}

/// Nearest-neighbour resampling of a mask.
pub fn resample_mask(m: &MaskVolume, target_mm: f64) -> Result<MaskVolume> {
    let v = resample_isotropic(&m.to_volume(), target_mm, Interpolation::Nearest)?;
    Ok(MaskVolume::from_volume(&v))
}
