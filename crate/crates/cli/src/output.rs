use std::path::Path;

use anyhow::Context as _;
use serde::Serialize;

use dilution_core::metrics::stats::MedianIqr;
use dilution_core::metrics::CohortStats;

/// Resolved options of one run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub sequential: bool,
    pub thread_cap: Option<usize>,
    pub options: &'a T,
}

pub fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

pub fn fmt_iqr(m: &MedianIqr, decimals: usize) -> String {
    if m.n == 0 {
        "n/a".into()
    } else {
        m.display(decimals)
    }
}

/// One row per configuration: `median [q1--q3]` and `rate [CI]`.
pub fn write_table(path: &Path, stats: &CohortStats) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "config",
        "n_scans",
        "n_detected",
        "sdsc",
        "volume_ratio",
        "detection_pct",
        "n_continuous",
    ])?;
    for c in &stats.configs {
        w.write_record([
            c.config_id.clone(),
            c.n_scans.to_string(),
            c.n_detected.to_string(),
            fmt_iqr(&c.sdsc, 3),
            fmt_iqr(&c.volume_ratio, 2),
            format!(
                "{:.1} [{:.1}--{:.1}]",
                100.0 * c.detection_rate,
                100.0 * c.detection_ci.0,
                100.0 * c.detection_ci.1
            ),
            c.sdsc.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_comparisons(path: &Path, stats: &CohortStats) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "config_a",
        "config_b",
        "n_pairs",
        "n_continuous",
        "sdsc_p",
        "sdsc_p_adj",
        "vr_p",
        "vr_p_adj",
        "detection_delta_pp",
        "detection_p",
        "detection_p_adj",
    ])?;
    for c in &stats.comparisons {
        let t = &c.tests;
        w.write_record([
            t.config_a.clone(),
            t.config_b.clone(),
            t.n_pairs.to_string(),
            t.n_continuous.to_string(),
            format!("{:.6}", t.sdsc.p_value),
            format!("{:.6}", c.sdsc_p_adjusted),
            format!("{:.6}", t.volume_ratio.p_value),
            format!("{:.6}", c.volume_ratio_p_adjusted),
            format!("{:.1}", t.detection_delta_pp),
            format!("{:.6}", t.detection.p_value),
            format!("{:.6}", c.detection_p_adjusted),
        ])?;
    }
    w.flush()?;
    Ok(())
}
