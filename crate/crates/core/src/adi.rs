//! Attention entropy split between real and padding keys, and the
//! attention dilution index (ADI) built from it.
//!
//! For every real query row the entropy `-Σ α ln α` is split into the part
//! spent on real keys and the part spent on padding keys (volume or window
//! padding). Within a scan the parts are summed over heads, windows and
//! blocks of a stage before taking the ratio; cohort values are plain means
//! of the per-scan ratios.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{padding_fraction, CropPlan};
use crate::metrics::{mean_sd, spearman, surface_dsc, Correlation, SURFACE_TOLERANCE_MM};
use crate::swinsim::ratt::RattReader;
use crate::swinsim::{AttentionSink, AttentionView, Encoder, EncoderConfig, TokenClass};
use crate::volumes::{load_mask, load_volume, preprocess, CohortManifest, ScanRecord, Volume};

/// Entropy and mass sums for one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSums {
    pub sum_h_rr: f64,
    pub sum_h_rp: f64,
    /// Portion of `sum_h_rp` spent on window-padding keys.
    pub sum_h_rp_window: f64,
    pub n_real_queries: u64,
    pub mass_rr: f64,
    pub mass_rp: f64,
    pub mass_rp_window: f64,
    pub n_pad_queries: u64,
    pub mass_pr: f64,
    pub mass_pp: f64,
}

impl StageSums {
    fn merge(&mut self, o: &StageSums) {
        self.sum_h_rr += o.sum_h_rr;
        self.sum_h_rp += o.sum_h_rp;
        self.sum_h_rp_window += o.sum_h_rp_window;
        self.n_real_queries += o.n_real_queries;
        self.mass_rr += o.mass_rr;
        self.mass_rp += o.mass_rp;
        self.mass_rp_window += o.mass_rp_window;
        self.n_pad_queries += o.n_pad_queries;
        self.mass_pr += o.mass_pr;
        self.mass_pp += o.mass_pp;
    }
}

/// Per-stage running sums. Accumulators from different record subsets merge
/// by addition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdiAccumulator {
    pub stages: Vec<StageSums>,
}

/// Mean attention mass per query by pair type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionBreakdown {
    pub real_to_real: f64,
    pub real_to_pad: f64,
    pub real_to_window_pad: f64,
    pub pad_to_real: f64,
    pub pad_to_pad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageAdi {
    pub stage: usize,
    pub adi: f64,
    /// Share of the total entropy spent on window-padding keys.
    pub adi_window: f64,
    /// Total real-query entropy was zero; `adi` is reported as 0.
    pub degenerate: bool,
    pub sum_h_rr: f64,
    pub sum_h_rp: f64,
    pub n_real_queries: u64,
    pub breakdown: InteractionBreakdown,
}

#[inline]
fn neg_plogp(a: f32) -> f64 {
    if a > 0.0 {
        (-a * a.ln()) as f64
    } else {
        0.0
    }
}

impl AdiAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    fn stage_mut(&mut self, s: usize) -> &mut StageSums {
        if self.stages.len() <= s {
            self.stages.resize(s + 1, StageSums::default());
        }
        &mut self.stages[s]
    }

    /// Adds one attention matrix.
    pub fn accumulate(&mut self, view: &AttentionView<'_>) -> Result<()> {
        let nq = view.query_classes.len();
        let nk = view.key_classes.len();
        if view.weights.len() != nq * nk {
            return Err(Error::InvalidRecord(format!(
                "weights hold {} values but classes imply {nq}x{nk}",
                view.weights.len()
            )));
        }
        let mut part = StageSums::default();
        for (i, qc) in view.query_classes.iter().enumerate() {
            let row = &view.weights[i * nk..(i + 1) * nk];
            let (mut h_r, mut h_p, mut h_w) = (0.0f64, 0.0f64, 0.0f64);
            let (mut m_r, mut m_p, mut m_w) = (0.0f64, 0.0f64, 0.0f64);
            for (a, kc) in row.iter().zip(view.key_classes) {
                let a = *a;
                if !(a >= 0.0) {
                    return Err(Error::InvalidRecord(format!(
                        "stage {} block {} window {} head {}: weight {a} is negative or NaN",
                        view.stage, view.block, view.window_index, view.head
                    )));
                }
                if a == 0.0 {
                    continue;
                }
                match kc {
                    TokenClass::Real => {
                        m_r += a as f64;
                        if qc.is_real() {
                            h_r += neg_plogp(a);
                        }
                    }
                    TokenClass::VolumePad => {
                        m_p += a as f64;
                        if qc.is_real() {
                            h_p += neg_plogp(a);
                        }
                    }
                    TokenClass::WindowPad => {
                        m_p += a as f64;
                        m_w += a as f64;
                        if qc.is_real() {
                            let h = neg_plogp(a);
                            h_p += h;
                            h_w += h;
                        }
                    }
                }
            }
            if qc.is_real() {
                part.sum_h_rr += h_r;
                part.sum_h_rp += h_p;
                part.sum_h_rp_window += h_w;
                part.n_real_queries += 1;
                part.mass_rr += m_r;
                part.mass_rp += m_p;
                part.mass_rp_window += m_w;
            } else {
                part.n_pad_queries += 1;
                part.mass_pr += m_r;
                part.mass_pp += m_p;
            }
        }
        self.stage_mut(view.stage as usize).merge(&part);
        Ok(())
    }

    pub fn merge(&mut self, other: &AdiAccumulator) {
        for (s, o) in other.stages.iter().enumerate() {
            self.stage_mut(s).merge(o);
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// ADI per stage. A stage with zero total entropy reports 0 and sets
    /// the degenerate flag.
    pub fn finalize(&self) -> Vec<StageAdi> {
        self.stages
            .iter()
            .enumerate()
            .map(|(stage, s)| {
                let total = s.sum_h_rr + s.sum_h_rp;
                let degenerate = !(total > 0.0);
                let ratio = |x: f64| if degenerate { 0.0 } else { (x / total).clamp(0.0, 1.0) };
                let per = |x: f64, n: u64| if n == 0 { 0.0 } else { x / n as f64 };
                StageAdi {
                    stage,
                    adi: ratio(s.sum_h_rp),
                    adi_window: ratio(s.sum_h_rp_window),
                    degenerate,
                    sum_h_rr: s.sum_h_rr,
                    sum_h_rp: s.sum_h_rp,
                    n_real_queries: s.n_real_queries,
                    breakdown: InteractionBreakdown {
                        real_to_real: per(s.mass_rr, s.n_real_queries),
                        real_to_pad: per(s.mass_rp, s.n_real_queries),
                        real_to_window_pad: per(s.mass_rp_window, s.n_real_queries),
                        pad_to_real: per(s.mass_pr, s.n_pad_queries),
                        pad_to_pad: per(s.mass_pp, s.n_pad_queries),
                    },
                }
            })
            .collect()
    }
}

impl AttentionSink for AdiAccumulator {
    fn record(&mut self, view: &AttentionView<'_>) -> Result<()> {
        self.accumulate(view)
    }
}

/// Streams an attention dump into a fresh accumulator.
pub fn accumulate_dump(path: &Path) -> Result<AdiAccumulator> {
    let reader = RattReader::open(path)?;
    let mut acc = AdiAccumulator::new();
    for rec in reader {
        acc.accumulate(&rec?.view())?;
    }
    Ok(acc)
}

/// Where attention matrices come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// Run the toy encoder on each cropped scan.
    Simulate(EncoderConfig),
    /// Read `<dir>/<scan_id>.ratt` per scan.
    Dumps(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdiSettings {
    pub source: AttentionSource,
    pub plan: CropPlan,
    /// Clip and rescale each scan before cropping.
    pub preprocess: bool,
    /// Prediction configuration whose surface Dice is joined per scan.
    pub sdsc_config: Option<String>,
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanAdi {
    pub scan_id: String,
    pub native_z_extent: usize,
    pub pf: f64,
    pub stages: Vec<StageAdi>,
    pub sdsc: Option<f64>,
    pub error: Option<String>,
}

impl ScanAdi {
    pub fn adi(&self, stage: usize) -> Option<f64> {
        self.stages.get(stage).map(|s| s.adi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub n_scans: usize,
    pub mean_adi: f64,
    pub sd_adi: f64,
    pub mean_adi_window: f64,
    pub n_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdiReport {
    pub scans: Vec<ScanAdi>,
    pub stages: Vec<StageSummary>,
    /// Spearman correlation of pf with last-stage ADI; `None` when undefined.
    pub pf_vs_last_stage: Option<Correlation>,
    pub correlation_undefined: bool,
    pub last_stage_vs_sdsc: Option<Correlation>,
    pub pf_vs_sdsc: Option<Correlation>,
    pub n_failed: usize,
}

impl AdiReport {
    pub fn ok_scans(&self) -> impl Iterator<Item = &ScanAdi> {
        self.scans.iter().filter(|s| s.error.is_none())
    }

    pub fn mean_adi(&self, stage: usize) -> Option<f64> {
        self.stages.get(stage).map(|s| s.mean_adi)
    }
}

/// Crops one in-memory scan and runs the encoder over it.
pub fn volume_adi(image: &Volume, plan: &CropPlan, encoder: &Encoder, clip_and_scale: bool) -> Result<AdiAccumulator> {
    let prepared;
    let image = if clip_and_scale {
        prepared = preprocess(image)?;
        &prepared
    } else {
        image
    };
    let (cropped, indicator) = plan.apply(image);
    let mut acc = AdiAccumulator::new();
    encoder.forward(&cropped, &indicator, &mut acc)?;
    Ok(acc)
}

fn analyse_scan(
    manifest: &CohortManifest,
    scan: &ScanRecord,
    settings: &AdiSettings,
    encoder: Option<&Encoder>,
) -> Result<(f64, AdiAccumulator, Option<f64>)> {
    let image = load_volume(&manifest.image_path(scan))?;
    let pf = padding_fraction(image.shape[2], settings.plan.crop[2])?;
    let acc = match (&settings.source, encoder) {
        (AttentionSource::Simulate(_), Some(enc)) => volume_adi(&image, &settings.plan, enc, settings.preprocess)?,
        (AttentionSource::Dumps(dir), _) => accumulate_dump(&dir.join(format!("{}.ratt", scan.scan_id)))?,
        (AttentionSource::Simulate(_), None) => unreachable!("encoder built for simulate source"),
    };
    let sdsc = match &settings.sdsc_config {
        Some(cfg) => {
            let path = manifest.prediction_path(cfg, &scan.scan_id).ok_or_else(|| {
                Error::Manifest(format!("no prediction for scan {} under {cfg}", scan.scan_id))
            })?;
            let pred = load_mask(&path)?;
            let reference = load_mask(&manifest.mask_path(scan))?;
            Some(surface_dsc(&pred, &reference, SURFACE_TOLERANCE_MM)?)
        }
        None => None,
    };
    Ok((pf, acc, sdsc))
}

/// Per-scan ADI over a cohort. Failures are recorded on the scan and the
/// rest of the cohort still runs.
pub fn cohort_analysis(manifest: &CohortManifest, settings: &AdiSettings) -> Result<AdiReport> {
    let encoder = match &settings.source {
        AttentionSource::Simulate(cfg) => Some(Encoder::new(cfg.clone())?),
        AttentionSource::Dumps(_) => None,
    };
    let scans = settings.execution.map(&manifest.scans, |scan| {
        let mut row = ScanAdi {
            scan_id: scan.scan_id.clone(),
            native_z_extent: scan.native_z_extent,
            pf: f64::NAN,
            stages: Vec::new(),
            sdsc: None,
            error: None,
        };
        match analyse_scan(manifest, scan, settings, encoder.as_ref()) {
            Ok((pf, acc, sdsc)) => {
                row.pf = pf;
                row.stages = acc.finalize();
                row.sdsc = sdsc;
            }
            Err(e) => {
                log::warn!("scan {}: {e}", scan.scan_id);
                row.error = Some(e.to_string());
            }
        }
        row
    });
    Ok(summarize(scans))
}

/// Cohort statistics from per-scan rows.
pub fn summarize(scans: Vec<ScanAdi>) -> AdiReport {
    let ok: Vec<&ScanAdi> = scans.iter().filter(|s| s.error.is_none()).collect();
    let n_stages = ok.iter().map(|s| s.stages.len()).max().unwrap_or(0);
    let stages = (0..n_stages)
        .map(|stage| {
            let vals: Vec<&StageAdi> = ok.iter().filter_map(|s| s.stages.get(stage)).collect();
            let adi: Vec<f64> = vals.iter().map(|v| v.adi).collect();
            let win: Vec<f64> = vals.iter().map(|v| v.adi_window).collect();
            let (mean_adi, sd_adi) = mean_sd(&adi);
            StageSummary {
                stage,
                n_scans: vals.len(),
                mean_adi,
                sd_adi,
                mean_adi_window: mean_sd(&win).0,
                n_degenerate: vals.iter().filter(|v| v.degenerate).count(),
            }
        })
        .collect();
    let last = n_stages.saturating_sub(1);
    let with_last: Vec<&&ScanAdi> = ok.iter().filter(|s| s.stages.len() > last).collect();
    let pf: Vec<f64> = with_last.iter().map(|s| s.pf).collect();
    let adi_last: Vec<f64> = with_last.iter().map(|s| s.stages[last].adi).collect();
    let pf_vs_last_stage = if n_stages > 0 { spearman(&pf, &adi_last) } else { None };
    let with_sdsc: Vec<&&ScanAdi> = with_last.iter().copied().filter(|s| s.sdsc.is_some()).collect();
    let sd: Vec<f64> = with_sdsc.iter().filter_map(|s| s.sdsc).collect();
    let last_stage_vs_sdsc = spearman(&with_sdsc.iter().map(|s| s.stages[last].adi).collect::<Vec<_>>(), &sd);
    let pf_vs_sdsc = spearman(&with_sdsc.iter().map(|s| s.pf).collect::<Vec<_>>(), &sd);
    AdiReport {
        n_failed: scans.len() - ok.len(),
        correlation_undefined: pf_vs_last_stage.is_none(),
        pf_vs_last_stage,
        last_stage_vs_sdsc,
        pf_vs_sdsc,
        stages,
        scans,
    }
}
