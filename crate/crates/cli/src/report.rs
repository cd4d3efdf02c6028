//! Joins per-scan tables into the cohort summary and plot-ready CSVs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context as _;

use dilution_core::metrics::stats::MedianIqr;
use dilution_core::metrics::{aggregate, EvalRecord, PenaltyPolicy};

use crate::args::ReportArgs;
use crate::commands::Context;
use crate::output::{csv_writer, write_comparisons, write_json, write_table};
use crate::usage;

fn read_eval(path: &Path) -> anyhow::Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<EvalRecord>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

struct AdiRow {
    scan_id: String,
    pf: f64,
    adi: Vec<f64>,
}

fn read_adi(path: &Path) -> anyhow::Result<(Vec<String>, Vec<AdiRow>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (id, pf) = match (col("scan_id"), col("pf")) {
        (Some(a), Some(b)) => (a, b),
        _ => anyhow::bail!("{} has no scan_id/pf columns", path.display()),
    };
    let stage_cols: Vec<(String, usize)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("adi_s"))
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let err = col("error");
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if err.is_some_and(|e| !rec[e].is_empty()) {
            continue;
        }
        let adi = stage_cols
            .iter()
            .map(|(_, i)| rec[*i].parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("bad ADI value for {}", &rec[id]))?;
        rows.push(AdiRow {
            scan_id: rec[id].to_string(),
            pf: rec[pf].parse()?,
            adi,
        });
    }
    Ok((stage_cols.into_iter().map(|(h, _)| h).collect(), rows))
}

pub fn run(ctx: &Context, a: ReportArgs) -> anyhow::Result<()> {
    if a.pf_edges.len() < 2 || a.pf_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--pf-edges needs at least two increasing values"));
    }
    let mut records: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for path in &a.eval {
        for r in read_eval(path)? {
            records.entry(r.config_id.clone()).or_default().push(r);
        }
    }
    let penalty = PenaltyPolicy {
        sdsc: a.penalty_sdsc,
        volume_ratio: a.penalty_vr,
    };
    let stats = aggregate(&records, penalty)?;
    ctx.record(&a.out, "report", &a)?;
    write_table(&a.out.join("table.csv"), &stats)?;
    write_comparisons(&a.out.join("comparisons.csv"), &stats)?;
    write_json(&a.out.join("report.json"), &stats)?;

    let Some(adi_path) = &a.adi else {
        return Ok(());
    };
    let (stage_names, adi) = read_adi(adi_path)?;
    let configs: Vec<&String> = records.keys().collect();
    let by_scan: BTreeMap<(&str, &str), &EvalRecord> = records
        .iter()
        .flat_map(|(c, rs)| rs.iter().map(move |r| ((c.as_str(), r.scan_id.as_str()), r)))
        .collect();

    let mut w = csv_writer(&a.out.join("pf_vs_adi.csv"))?;
    let mut header = vec!["scan_id".to_string(), "pf".into()];
    header.extend(stage_names.iter().cloned());
    header.extend(configs.iter().map(|c| format!("sdsc_{c}")));
    w.write_record(&header)?;
    for row in &adi {
        let mut out = vec![row.scan_id.clone(), row.pf.to_string()];
        out.extend(row.adi.iter().map(f64::to_string));
        for c in &configs {
            out.push(
                by_scan
                    .get(&(c.as_str(), row.scan_id.as_str()))
                    .map(|r| penalty.sdsc_of(r).to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&out)?;
    }
    w.flush()?;

    let mut w = csv_writer(&a.out.join("sdsc_by_pf.csv"))?;
    w.write_record(["config", "pf_lo", "pf_hi", "n", "sdsc_median", "sdsc_q1", "sdsc_q3"])?;
    let last = a.pf_edges.len() - 2;
    for c in &configs {
        for (b, edge) in a.pf_edges.windows(2).enumerate() {
            let inside = |pf: f64| pf >= edge[0] && (pf < edge[1] || (b == last && pf <= edge[1]));
            let vals: Vec<f64> = adi
                .iter()
                .filter(|r| inside(r.pf))
                .filter_map(|r| by_scan.get(&(c.as_str(), r.scan_id.as_str())))
                .map(|r| penalty.sdsc_of(r))
                .collect();
            let m = MedianIqr::of(&vals);
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            w.write_record([
                c.to_string(),
                edge[0].to_string(),
                edge[1].to_string(),
                vals.len().to_string(),
                f(m.map(|m| m.median)),
                f(m.map(|m| m.q1)),
                f(m.map(|m| m.q3)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
