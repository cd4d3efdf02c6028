//! Seeded pelvic-like phantoms: an elliptical body cylinder at background
//! level, an ellipsoidal tumor with blurred edges, and additive noise inside
//! the body. Air outside the body is exactly zero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::padding_fraction;
use crate::volumes::{
    linear_index, save_mask, save_volume, CohortManifest, MaskVolume, ScanRecord, Shape3, Subtype, Volume,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub in_plane: usize,
    pub z_extent: usize,
    pub spacing_mm: f64,
    pub background_level: f64,
    pub tumor_level: f64,
    /// Gaussian edge blur, mm. Zero gives a hard edge.
    pub boundary_sigma: f64,
    /// Semi-axes of the tumor ellipsoid, mm.
    pub tumor_radius_mm: [f64; 3],
    /// Tumor centre in voxel coordinates; `None` centres it.
    pub tumor_center: Option<[f64; 3]>,
    pub noise_sd: f64,
    /// Intensity of a bright outer body rim (subcutaneous fat), covering
    /// the outer tenth of the body radius. `None` leaves the body uniform.
    #[serde(default)]
    pub rim_level: Option<f64>,
    pub seed: u64,
}

pub const RIM_START: f64 = 0.9;

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            in_plane: 128,
            z_extent: 93,
            spacing_mm: 1.0,
            background_level: 0.4,
            tumor_level: 0.7,
            boundary_sigma: 0.5,
            tumor_radius_mm: [14.0, 12.0, 12.0],
            tumor_center: None,
            noise_sd: 0.02,
            rim_level: None,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn shape(&self) -> Shape3 {
        [self.in_plane, self.in_plane, self.z_extent]
    }

    fn center(&self) -> [f64; 3] {
        self.tumor_center.unwrap_or([
            (self.in_plane as f64 - 1.0) / 2.0,
            (self.in_plane as f64 - 1.0) / 2.0,
            (self.z_extent as f64 - 1.0) / 2.0,
        ])
    }

    fn body_radii(&self) -> [f64; 2] {
        [0.45 * self.in_plane as f64, 0.36 * self.in_plane as f64]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_plane < 4 || self.z_extent < 4 {
            return Err(Error::invalid("phantom needs at least 4 voxels per axis"));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::invalid("spacing must be > 0"));
        }
        for l in [self.background_level, self.tumor_level].into_iter().chain(self.rim_level) {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid(format!("intensity level {l} outside [0,1]")));
            }
        }
        if self.background_level <= 0.0 || self.background_level == self.tumor_level {
            return Err(Error::invalid("background level must be > 0 and differ from the tumor level"));
        }
        if self.boundary_sigma < 0.0 || self.noise_sd < 0.0 {
            return Err(Error::invalid("blur and noise must be >= 0"));
        }
        let c = self.center();
        let shape = self.shape();
        for a in 0..3 {
            let r = self.tumor_radius_mm[a] / self.spacing_mm;
            if !(self.tumor_radius_mm[a] > 0.0) || c[a] - r < 0.0 || c[a] + r > shape[a] as f64 - 1.0 {
                return Err(Error::invalid(format!(
                    "tumor radius {} mm exceeds the volume along axis {a}",
                    self.tumor_radius_mm[a]
                )));
            }
        }
        let [bx, by] = self.body_radii();
        let half = (self.in_plane as f64 - 1.0) / 2.0;
        let dx = (c[0] - half).abs() + self.tumor_radius_mm[0] / self.spacing_mm;
        let dy = (c[1] - half).abs() + self.tumor_radius_mm[1] / self.spacing_mm;
        if (dx / bx).powi(2) + (dy / by).powi(2) > 1.0 {
            return Err(Error::invalid("tumor extends outside the body"));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f32> {
    let r = (3.0 * sigma_vox).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with edge clamping.
fn blur(field: &mut [f32], shape: Shape3, sigma_vox: f64) {
    let k = gaussian_kernel(sigma_vox);
    let r = (k.len() / 2) as isize;
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        let others: Vec<usize> = (0..3).filter(|a| *a != axis).collect();
        line.resize(n, 0.0f32);
        for b in 0..shape[others[1]] {
            for a in 0..shape[others[0]] {
                let at = |t: usize| {
                    let mut p = [0usize; 3];
                    p[axis] = t;
                    p[others[0]] = a;
                    p[others[1]] = b;
                    linear_index(shape, p[0], p[1], p[2])
                };
                for t in 0..n {
                    line[t] = field[at(t)];
                }
                for t in 0..n {
                    let mut acc = 0.0f32;
                    for (i, w) in k.iter().enumerate() {
                        let s = (t as isize + i as isize - r).clamp(0, n as isize - 1) as usize;
                        acc += w * line[s];
                    }
                    field[at(t)] = acc;
                }
            }
        }
    }
}

/// Renders one phantom. The mask is the unblurred ellipsoid.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, MaskVolume)> {
    spec.validate()?;
    let shape = spec.shape();
    let sp = [spec.spacing_mm; 3];
    let c = spec.center();
    let rad: Vec<f64> = spec.tumor_radius_mm.iter().map(|r| r / spec.spacing_mm).collect();
    let mut mask = MaskVolume::empty(shape, sp)?;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let p = [x as f64, y as f64, z as f64];
                let d: f64 = (0..3).map(|a| ((p[a] - c[a]) / rad[a]).powi(2)).sum();
                if d <= 1.0 {
                    mask.set(x, y, z, true);
                    for (a, v) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    if mask.count() == 0 {
        return Err(Error::invalid("tumor ellipsoid covers no voxel centre"));
    }

    // Blurred tumor indicator on a padded bounding box.
    let sigma_vox = spec.boundary_sigma / spec.spacing_mm;
    let margin = (3.0 * sigma_vox).ceil() as usize + 1;
    let b0: Vec<usize> = (0..3).map(|a| lo[a].saturating_sub(margin)).collect();
    let b1: Vec<usize> = (0..3).map(|a| (hi[a] + margin).min(shape[a] - 1)).collect();
    let bshape = [b1[0] - b0[0] + 1, b1[1] - b0[1] + 1, b1[2] - b0[2] + 1];
    let mut soft = vec![0.0f32; bshape.iter().product()];
    for z in 0..bshape[2] {
        for y in 0..bshape[1] {
            for x in 0..bshape[0] {
                if mask.get(x + b0[0], y + b0[1], z + b0[2]) {
                    soft[linear_index(bshape, x, y, z)] = 1.0;
                }
            }
        }
    }
    if sigma_vox > 0.0 {
        blur(&mut soft, bshape, sigma_vox);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let [bx, by] = spec.body_radii();
    let half = (spec.in_plane as f64 - 1.0) / 2.0;
    let mut data = vec![0.0f32; shape.iter().product()];
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let r2 = ((x as f64 - half) / bx).powi(2) + ((y as f64 - half) / by).powi(2);
                if r2 > 1.0 {
                    continue;
                }
                let mut v = match spec.rim_level {
                    Some(rim) if r2 >= RIM_START * RIM_START => rim,
                    _ => spec.background_level,
                };
                let in_box = (0..3).all(|a| [x, y, z][a] >= b0[a] && [x, y, z][a] <= b1[a]);
                if in_box {
                    let s = soft[linear_index(bshape, x - b0[0], y - b0[1], z - b0[2])] as f64;
                    v += (spec.tumor_level - spec.background_level) * s;
                }
                if spec.noise_sd > 0.0 {
                    v += noise.sample(&mut rng);
                }
                // Keep body voxels strictly positive so they always count as
                // foreground tissue.
                data[linear_index(shape, x, y, z)] = v.clamp(1e-3, 1.0) as f32;
            }
        }
    }
    Ok((Volume::new(shape, sp, data)?, mask))
}

/// Axial extent distribution for generated cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZDistribution {
    /// Normal(94, 37) truncated to [40, 140]: median about 93 with IQR
    /// roughly 70 to 120.
    TableLike,
    Uniform { lo: usize, hi: usize },
    Fixed(usize),
}

impl Default for ZDistribution {
    fn default() -> Self {
        ZDistribution::TableLike
    }
}

impl ZDistribution {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            ZDistribution::TableLike => {
                let n = Normal::new(94.0, 37.0).expect("valid");
                loop {
                    let v: f64 = n.sample(rng);
                    if (40.0..=140.0).contains(&v) {
                        return v.round() as usize;
                    }
                }
            }
            ZDistribution::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
            ZDistribution::Fixed(z) => *z,
        }
    }
}

/// Appearance presets for the two planted subtypes.
fn subtype_spec<R: Rng>(subtype: Subtype, z: usize, in_plane: usize, rng: &mut R) -> PhantomSpec {
    let bg = rng.random_range(0.36..0.44);
    let (tumor, sigma, radius, noise): (f64, f64, f64, f64) = match subtype {
        Subtype::B => (
            rng.random_range(0.68..0.82),
            rng.random_range(0.3..0.8),
            rng.random_range(10.0..16.0),
            0.02,
        ),
        Subtype::D => (
            rng.random_range(0.22..0.30),
            rng.random_range(1.5..2.5),
            rng.random_range(7.0..12.0),
            0.03,
        ),
    };
    let radius = radius * (in_plane as f64 / 128.0).min(1.0);
    let rz = radius.min((z as f64 - 1.0) / 2.0 - 2.0).max(2.0);
    let half = (in_plane as f64 - 1.0) / 2.0;
    let jitter = 0.05 * in_plane as f64;
    PhantomSpec {
        in_plane,
        z_extent: z,
        spacing_mm: 1.0,
        background_level: bg,
        tumor_level: tumor,
        boundary_sigma: sigma,
        tumor_radius_mm: [radius * rng.random_range(0.9..1.1), radius * rng.random_range(0.8..1.0), rz],
        tumor_center: Some([
            half + rng.random_range(-jitter..jitter),
            half + rng.random_range(-jitter..jitter),
            (z as f64 - 1.0) / 2.0,
        ]),
        noise_sd: noise,
        rim_level: Some(rng.random_range(0.9..0.98)),
        seed: rng.random(),
    }
}

/// Simulated segmentation output for a named configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionModel {
    pub config_id: String,
    /// Miss probability at zero padding.
    pub miss_rate: f64,
    /// Added miss probability per unit padding fraction (crop `crop_z`).
    pub pf_miss_slope: f64,
    /// Added miss probability for dark tumors.
    pub dark_miss_extra: f64,
    /// Largest random translation of the reference mask, voxels.
    pub max_shift: usize,
    pub crop_z: usize,
}

impl PredictionModel {
    pub fn new(config_id: &str, miss_rate: f64, max_shift: usize) -> Self {
        Self {
            config_id: config_id.to_string(),
            miss_rate,
            pf_miss_slope: 0.2,
            dark_miss_extra: 0.1,
            max_shift,
            crop_z: 128,
        }
    }
}

fn shifted(mask: &MaskVolume, d: [isize; 3]) -> MaskVolume {
    let mut out = MaskVolume::empty(mask.shape, mask.spacing_mm).expect("same grid");
    let s = mask.shape;
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                if !mask.get(x, y, z) {
                    continue;
                }
                let p = [x as isize + d[0], y as isize + d[1], z as isize + d[2]];
                if (0..3).all(|a| p[a] >= 0 && p[a] < s[a] as isize) {
                    out.set(p[0] as usize, p[1] as usize, p[2] as usize, true);
                }
            }
        }
    }
    out
}

/// A perturbed copy of `reference`, or a small far-away blob when missed.
pub fn simulate_prediction<R: Rng>(
    model: &PredictionModel,
    reference: &MaskVolume,
    subtype: Option<Subtype>,
    rng: &mut R,
) -> Result<MaskVolume> {
    let pf = padding_fraction(reference.shape[2], model.crop_z)?;
    let mut p_miss = model.miss_rate + model.pf_miss_slope * pf;
    if subtype == Some(Subtype::D) {
        p_miss += model.dark_miss_extra;
    }
    let missed = rng.random_bool(p_miss.clamp(0.0, 1.0));
    let s = reference.shape;
    if missed {
        let mut m = MaskVolume::empty(s, reference.spacing_mm)?;
        let side = 3.min(s[0]).min(s[1]).min(s[2]);
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    m.set(x + s[0] / 8, y + s[1] / 8, z, true);
                }
            }
        }
        return Ok(m);
    }
    let m = model.max_shift as i64;
    let scale = 1.0 + pf;
    let d = [
        (rng.random_range(-m..=m) as f64 * scale).round() as isize,
        (rng.random_range(-m..=m) as f64 * scale).round() as isize,
        rng.random_range(-m..=m) as isize,
    ];
    Ok(shifted(reference, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub cohort_id: String,
    pub n: usize,
    pub in_plane: usize,
    pub z_distribution: ZDistribution,
    /// Relative weights of subtypes B and D.
    pub subtype_mix: (f64, f64),
    pub seed: u64,
    pub predictions: Vec<PredictionModel>,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            cohort_id: "synthetic".into(),
            n: 50,
            in_plane: 128,
            z_distribution: ZDistribution::TableLike,
            subtype_mix: (0.5, 0.5),
            seed: 0,
            predictions: Vec::new(),
        }
    }
}

/// Per-scan plan drawn up-front so results do not depend on scheduling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedScan {
    pub scan_id: String,
    pub subtype: Subtype,
    pub phantom: PhantomSpec,
    pub prediction_seed: u64,
}

pub fn plan_cohort(spec: &CohortSpec) -> Result<Vec<PlannedScan>> {
    if spec.n < 2 {
        return Err(Error::invalid("a cohort needs at least 2 scans"));
    }
    let (wb, wd) = spec.subtype_mix;
    if !(wb >= 0.0 && wd >= 0.0 && wb + wd > 0.0) {
        return Err(Error::invalid("subtype weights must be >= 0 with a positive sum"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = (spec.n - 1).to_string().len().max(3);
    Ok((0..spec.n)
        .map(|i| {
            let z = spec.z_distribution.sample(&mut rng);
            let subtype = if rng.random_bool(wb / (wb + wd)) { Subtype::B } else { Subtype::D };
            let phantom = subtype_spec(subtype, z, spec.in_plane, &mut rng);
            PlannedScan {
                scan_id: format!("scan{i:0width$}"),
                subtype,
                phantom,
                prediction_seed: rng.random(),
            }
        })
        .collect())
}

/// Writes images, masks and simulated predictions under `out_dir` and
/// returns the saved manifest (`out_dir/manifest.json`).
pub fn generate_cohort(spec: &CohortSpec, out_dir: &Path, exec: Execution) -> Result<CohortManifest> {
    let plan = plan_cohort(spec)?;
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir, e))?;
    }
    for m in &spec.predictions {
        let d = out_dir.join("pred").join(&m.config_id);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let results = exec.map(&plan, |p| -> Result<(ScanRecord, Vec<(String, PathBuf)>)> {
        let (image, mask) = generate(&p.phantom)?;
        let img_rel = PathBuf::from("images").join(&p.scan_id);
        let mask_rel = PathBuf::from("masks").join(&p.scan_id);
        save_volume(&image, &out_dir.join(&img_rel))?;
        save_mask(&mask, &out_dir.join(&mask_rel))?;
        let mut preds = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(p.prediction_seed);
        for model in &spec.predictions {
            let pred = simulate_prediction(model, &mask, Some(p.subtype), &mut rng)?;
            let rel = PathBuf::from("pred").join(&model.config_id).join(&p.scan_id);
            save_mask(&pred, &out_dir.join(&rel))?;
            preds.push((model.config_id.clone(), rel));
        }
        Ok((
            ScanRecord {
                scan_id: p.scan_id.clone(),
                image_path: img_rel,
                mask_path: mask_rel,
                native_z_extent: image.shape[2],
                subtype: Some(p.subtype),
            },
            preds,
        ))
    });
    let mut manifest = CohortManifest {
        cohort_id: spec.cohort_id.clone(),
        scans: Vec::with_capacity(plan.len()),
        predictions: BTreeMap::new(),
        base_dir: out_dir.to_path_buf(),
    };
    for r in results {
        let (rec, preds) = r?;
        for (cfg, path) in preds {
            manifest.predictions.entry(cfg).or_default().insert(rec.scan_id.clone(), path);
        }
        manifest.scans.push(rec);
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            in_plane: 40,
            z_extent: 30,
            tumor_radius_mm: [6.0, 5.0, 5.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn noiseless_sharp_phantom_is_two_level() {
        let spec = PhantomSpec {
            noise_sd: 0.0,
            boundary_sigma: 0.0,
            ..small()
        };
        let (v, m) = generate(&spec).unwrap();
        let mut levels: Vec<f32> = v.data.clone();
        levels.sort_by(f32::total_cmp);
        levels.dedup();
        assert_eq!(levels, vec![0.0, 0.4, 0.7]);
        for (val, inside) in v.data.iter().zip(&m.data) {
            if *inside == 1 {
                assert_eq!(*val, 0.7);
            }
        }
    }

    #[test]
    fn same_seed_same_volume() {
        let (a, _) = generate(&small()).unwrap();
        let (b, _) = generate(&small()).unwrap();
        assert_eq!(a.data, b.data);
        let (c, _) = generate(&PhantomSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn oversized_tumor_rejected() {
        let spec = PhantomSpec {
            tumor_radius_mm: [6.0, 5.0, 20.0],
            ..small()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn table_like_extents() {
        let spec = CohortSpec {
            n: 50,
            ..CohortSpec::default()
        };
        let plan = plan_cohort(&spec).unwrap();
        let mut z: Vec<usize> = plan.iter().map(|p| p.phantom.z_extent).collect();
        z.sort();
        let median = (z[24] + z[25]) as f64 / 2.0;
        assert!((70.0..=120.0).contains(&median), "median {median}");
        assert!(z.iter().all(|v| (40..=140).contains(v)));
        assert_eq!(plan, plan_cohort(&spec).unwrap());
    }

    #[test]
    fn all_b_mix() {
        let spec = CohortSpec {
            n: 20,
            subtype_mix: (1.0, 0.0),
            ..CohortSpec::default()
        };
        assert!(plan_cohort(&spec).unwrap().iter().all(|p| p.subtype == Subtype::B));
    }

    #[test]
    fn mean_padding_fraction_in_band() {
        let spec = CohortSpec {
            n: 400,
            ..CohortSpec::default()
        };
        let pf: Vec<f64> = plan_cohort(&spec)
            .unwrap()
            .iter()
            .map(|p| padding_fraction(p.phantom.z_extent, 128).unwrap())
            .collect();
        let mean = pf.iter().sum::<f64>() / pf.len() as f64;
        assert!((0.2..=0.35).contains(&mean), "mean pf {mean}");
    }

    #[test]
    fn every_planned_phantom_renders() {
        let spec = CohortSpec {
            n: 40,
            in_plane: 128,
            ..CohortSpec::default()
        };
        for p in plan_cohort(&spec).unwrap() {
            p.phantom.validate().unwrap();
        }
    }

    #[test]
    fn cohort_written_and_reloaded() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CohortSpec {
            n: 3,
            in_plane: 48,
            z_distribution: ZDistribution::Uniform { lo: 40, hi: 60 },
            predictions: vec![PredictionModel::new("base", 0.1, 2)],
            seed: 4,
            ..CohortSpec::default()
        };
        let m = generate_cohort(&spec, dir.path(), Execution::Sequential).unwrap();
        let back = CohortManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.scans, m.scans);
        assert_eq!(back.predictions["base"].len(), 3);
        let again = tempfile::tempdir().unwrap();
        let m2 = generate_cohort(&spec, again.path(), Execution::Parallel).unwrap();
        assert_eq!(m2.scans, m.scans);
        let a = std::fs::read(dir.path().join("images/scan000.rvol.f32")).unwrap();
        let b = std::fs::read(again.path().join("images/scan000.rvol.f32")).unwrap();
        assert_eq!(a, b);
    }
}
