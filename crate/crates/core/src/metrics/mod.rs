//! Segmentation overlap metrics, detection, and cohort aggregation.

pub mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{linear_index, MaskVolume, Shape3, Subtype};

pub use stats::{
    average_ranks, bonferroni, mcnemar, mean_sd, spearman, wilcoxon_signed_rank, wilson_ci,
    Correlation, McNemarResult, MedianIqr, TestMethod, WilcoxonResult,
};

pub const DETECTION_DICE: f64 = 0.1;
pub const SURFACE_TOLERANCE_MM: f64 = 2.0;
/// Slack on the squared-distance comparison so exact ties at the tolerance
/// are counted as covered regardless of rounding.
const TOL_EPS: f64 = 1e-9;

fn check_grid(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if !a.same_grid(b) {
        return Err(Error::GridMismatch(format!(
            "{:?}@{:?} vs {:?}@{:?}",
            a.shape, a.spacing_mm, b.shape, b.spacing_mm
        )));
    }
    Ok(())
}

/// Volumetric Dice on voxel sets. Two empty masks score 1.
pub fn dice(pred: &MaskVolume, reference: &MaskVolume) -> Result<f64> {
    check_grid(pred, reference)?;
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (p, r) in pred.data.iter().zip(&reference.data) {
        a += *p as u64;
        b += *r as u64;
        inter += (*p & *r) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn is_detected(dice: f64) -> bool {
    dice >= DETECTION_DICE
}

/// Mask voxels with at least one 6-connected neighbour outside the mask.
/// The volume border counts as outside.
pub fn boundary(mask: &MaskVolume) -> Vec<bool> {
    let [nx, ny, nz] = mask.shape;
    let mut out = vec![false; mask.data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = linear_index(mask.shape, x, y, z);
                if mask.data[i] == 0 {
                    continue;
                }
                let outside = |dx: isize, dy: isize, dz: isize| {
                    let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                        return true;
                    }
                    mask.data[linear_index(mask.shape, xx as usize, yy as usize, zz as usize)] == 0
                };
                out[i] = outside(-1, 0, 0)
                    || outside(1, 0, 0)
                    || outside(0, -1, 0)
                    || outside(0, 1, 0)
                    || outside(0, 0, -1)
                    || outside(0, 0, 1);
            }
        }
    }
    out
}

/// One pass of the lower-envelope distance transform along a line.
/// `f` holds squared distances (infinite where unknown); `step` is the
/// physical spacing between samples.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * step;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for q in 0..n {
        while z[j + 1] < pos(q) {
            j += 1;
        }
        let d = pos(q) - pos(v[j]);
        out[q] = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the
/// nearest seed voxel. Infinite everywhere when there are no seeds.
pub fn squared_distance_transform(seeds: &[bool], shape: Shape3, spacing_mm: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|s| if *s { 0.0 } else { f64::INFINITY }).collect();
    let longest = shape.iter().copied().max().unwrap_or(0);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let [nx, ny, nz] = shape;
    for axis in 0..3 {
        let n = shape[axis];
        let (a_len, b_len) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for b in 0..b_len {
            for a in 0..a_len {
                let idx = |t: usize| match axis {
                    0 => linear_index(shape, t, a, b),
                    1 => linear_index(shape, a, t, b),
                    _ => linear_index(shape, a, b, t),
                };
                for t in 0..n {
                    line[t] = d[idx(t)];
                }
                edt_1d(&line[..n], spacing_mm[axis], &mut out[..n], &mut v, &mut z);
                for t in 0..n {
                    d[idx(t)] = out[t];
                }
            }
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDice {
    pub value: f64,
    /// Both masks were empty; the value is defined as 1.
    pub both_empty: bool,
}

/// Surface Dice at a distance tolerance in mm.
pub fn surface_dice(pred: &MaskVolume, reference: &MaskVolume, tol_mm: f64) -> Result<SurfaceDice> {
    check_grid(pred, reference)?;
    if !(tol_mm >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be >= 0, got {tol_mm}")));
    }
    let sp = boundary(pred);
    let sr = boundary(reference);
    let np = sp.iter().filter(|b| **b).count();
    let nr = sr.iter().filter(|b| **b).count();
    if np + nr == 0 {
        return Ok(SurfaceDice {
            value: 1.0,
            both_empty: true,
        });
    }
    if np == 0 || nr == 0 {
        return Ok(SurfaceDice {
            value: 0.0,
            both_empty: false,
        });
    }
    let limit = tol_mm * tol_mm + TOL_EPS;
    let to_ref = squared_distance_transform(&sr, reference.shape, reference.spacing_mm);
    let to_pred = squared_distance_transform(&sp, pred.shape, pred.spacing_mm);
    let covered_pred = sp.iter().zip(&to_ref).filter(|(b, d)| **b && **d <= limit).count();
    let covered_ref = sr.iter().zip(&to_pred).filter(|(b, d)| **b && **d <= limit).count();
    Ok(SurfaceDice {
        value: (covered_pred + covered_ref) as f64 / (np + nr) as f64,
        both_empty: false,
    })
}

pub fn surface_dsc(pred: &MaskVolume, reference: &MaskVolume, tol_mm: f64) -> Result<f64> {
    surface_dice(pred, reference, tol_mm).map(|s| s.value)
}

/// Predicted over reference volume in mm³.
pub fn volume_ratio(pred: &MaskVolume, reference: &MaskVolume) -> Result<f64> {
    check_grid(pred, reference)?;
    let r = reference.count();
    if r == 0 {
        return Err(Error::Degenerate("volume ratio needs a non-empty reference".into()));
    }
    Ok(pred.count() as f64 * pred.voxel_volume_mm3() / (r as f64 * reference.voxel_volume_mm3()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scan_id: String,
    pub config_id: String,
    pub detected: bool,
    pub dice: f64,
    pub sdsc: f64,
    pub volume_ratio: f64,
    pub subtype: Option<Subtype>,
}

pub fn evaluate_scan(
    scan_id: &str,
    config_id: &str,
    pred: &MaskVolume,
    reference: &MaskVolume,
    subtype: Option<Subtype>,
    tol_mm: f64,
) -> Result<EvalRecord> {
    let d = dice(pred, reference)?;
    Ok(EvalRecord {
        scan_id: scan_id.to_string(),
        config_id: config_id.to_string(),
        detected: is_detected(d),
        dice: d,
        sdsc: surface_dsc(pred, reference, tol_mm)?,
        volume_ratio: volume_ratio(pred, reference)?,
        subtype,
    })
}

/// Values substituted for missed scans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPolicy {
    pub sdsc: f64,
    pub volume_ratio: f64,
}

impl Default for PenaltyPolicy {
    fn default() -> Self {
        Self {
            sdsc: 0.1,
            volume_ratio: 10.0,
        }
    }
}

impl PenaltyPolicy {
    pub fn sdsc_of(&self, r: &EvalRecord) -> f64 {
        if r.detected {
            r.sdsc
        } else {
            self.sdsc
        }
    }

    pub fn vr_of(&self, r: &EvalRecord) -> f64 {
        if r.detected {
            r.volume_ratio
        } else {
            self.volume_ratio
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTests {
    pub config_a: String,
    pub config_b: String,
    pub n_pairs: usize,
    pub n_continuous: usize,
    pub sdsc: WilcoxonResult,
    pub volume_ratio: WilcoxonResult,
    pub detection: McNemarResult,
    /// Detection rate of A minus B, percentage points.
    pub detection_delta_pp: f64,
    pub median_sdsc_diff: f64,
}

/// Paired comparison of two configurations joined on scan id. Scans listed
/// in `excluded` are left out of the continuous-metric tests but kept for
/// detection.
pub fn paired_tests(
    a: &[EvalRecord],
    b: &[EvalRecord],
    penalty: PenaltyPolicy,
    excluded: &BTreeSet<String>,
) -> Result<PairedTests> {
    let by_id: BTreeMap<&str, &EvalRecord> = b.iter().map(|r| (r.scan_id.as_str(), r)).collect();
    let pairs: Vec<(&EvalRecord, &EvalRecord)> = a
        .iter()
        .filter_map(|ra| by_id.get(ra.scan_id.as_str()).map(|rb| (ra, *rb)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no paired cases between configurations"));
    }
    let det_a: Vec<bool> = pairs.iter().map(|(x, _)| x.detected).collect();
    let det_b: Vec<bool> = pairs.iter().map(|(_, y)| y.detected).collect();
    let cont: Vec<&(&EvalRecord, &EvalRecord)> =
        pairs.iter().filter(|(x, _)| !excluded.contains(&x.scan_id)).collect();
    if cont.is_empty() {
        return Err(Error::invalid("every paired case is excluded"));
    }
    let ds: Vec<f64> = cont.iter().map(|(x, y)| penalty.sdsc_of(x) - penalty.sdsc_of(y)).collect();
    let dv: Vec<f64> = cont.iter().map(|(x, y)| penalty.vr_of(x) - penalty.vr_of(y)).collect();
    let n = pairs.len() as f64;
    let rate = |v: &[bool]| v.iter().filter(|d| **d).count() as f64 / n;
    Ok(PairedTests {
        config_a: a[0].config_id.clone(),
        config_b: b[0].config_id.clone(),
        n_pairs: pairs.len(),
        n_continuous: cont.len(),
        sdsc: wilcoxon_signed_rank(&ds)?,
        volume_ratio: wilcoxon_signed_rank(&dv)?,
        detection: mcnemar(&det_a, &det_b)?,
        detection_delta_pp: 100.0 * (rate(&det_a) - rate(&det_b)),
        median_sdsc_diff: MedianIqr::of(&ds).map(|m| m.median).unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config_id: String,
    pub n_scans: usize,
    pub n_detected: usize,
    pub detection_rate: f64,
    pub detection_ci: (f64, f64),
    pub sdsc: MedianIqr,
    pub volume_ratio: MedianIqr,
    /// The penalty sDSC exceeds some detected sDSC value in this config.
    pub penalty_rank_violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub tests: PairedTests,
    pub sdsc_p_adjusted: f64,
    pub volume_ratio_p_adjusted: f64,
    pub detection_p_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub penalty: PenaltyPolicy,
    pub configs: Vec<ConfigSummary>,
    /// Scans missed by every configuration.
    pub excluded: Vec<String>,
    pub n_comparisons: usize,
    pub comparisons: Vec<Comparison>,
}

/// Cohort summary per configuration plus Bonferroni-adjusted pairwise tests.
pub fn aggregate(records: &BTreeMap<String, Vec<EvalRecord>>, penalty: PenaltyPolicy) -> Result<CohortStats> {
    if records.is_empty() || records.values().any(|v| v.is_empty()) {
        return Err(Error::invalid("aggregate needs at least one non-empty configuration"));
    }
    let mut detected_any: BTreeMap<&str, bool> = BTreeMap::new();
    for rs in records.values() {
        for r in rs {
            *detected_any.entry(r.scan_id.as_str()).or_insert(false) |= r.detected;
        }
    }
    let excluded: BTreeSet<String> = detected_any
        .iter()
        .filter(|(_, d)| !**d)
        .map(|(id, _)| id.to_string())
        .collect();

    let mut configs = Vec::new();
    for (id, rs) in records {
        let n = rs.len();
        let n_det = rs.iter().filter(|r| r.detected).count();
        let kept: Vec<&EvalRecord> = rs.iter().filter(|r| !excluded.contains(&r.scan_id)).collect();
        let sd: Vec<f64> = kept.iter().map(|r| penalty.sdsc_of(r)).collect();
        let vr: Vec<f64> = kept.iter().map(|r| penalty.vr_of(r)).collect();
        let empty = MedianIqr {
            median: f64::NAN,
            q1: f64::NAN,
            q3: f64::NAN,
            n: 0,
        };
        let min_detected = rs
            .iter()
            .filter(|r| r.detected)
            .map(|r| r.sdsc)
            .fold(f64::INFINITY, f64::min);
        configs.push(ConfigSummary {
            config_id: id.clone(),
            n_scans: n,
            n_detected: n_det,
            detection_rate: n_det as f64 / n as f64,
            detection_ci: wilson_ci(n_det as u64, n as u64, 0.95)?,
            sdsc: MedianIqr::of(&sd).unwrap_or(empty),
            volume_ratio: MedianIqr::of(&vr).unwrap_or(empty),
            penalty_rank_violation: n_det < n && penalty.sdsc > min_detected,
        });
    }

    let ids: Vec<&String> = records.keys().collect();
    let m = ids.len() * ids.len().saturating_sub(1) / 2;
    let mut comparisons = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let tests = paired_tests(&records[ids[i]], &records[ids[j]], penalty, &excluded)?;
            comparisons.push(Comparison {
                sdsc_p_adjusted: bonferroni(tests.sdsc.p_value, m),
                volume_ratio_p_adjusted: bonferroni(tests.volume_ratio.p_value, m),
                detection_p_adjusted: bonferroni(tests.detection.p_value, m),
                tests,
            });
        }
    }
    Ok(CohortStats {
        penalty,
        configs,
        excluded: excluded.into_iter().collect(),
        n_comparisons: m,
        comparisons,
    })
}
