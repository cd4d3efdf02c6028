use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context as _;
use serde::Serialize;

use dilution_core::adi::{cohort_analysis, AdiReport, AdiSettings, AttentionSource};
use dilution_core::augment::{AugmentParams, TumorAugmenter};
use dilution_core::cka::{self, CkaOptions, Estimator};
use dilution_core::geometry::{compute_estimate, token_budget, CropPlan};
use dilution_core::metrics::{aggregate, evaluate_scan, EvalRecord, PenaltyPolicy};
use dilution_core::subtypes::{self, AppearanceFeatures, FitOptions, SubtypeModel};
use dilution_core::swinsim::ratt::{RattHeader, RattWriter};
use dilution_core::swinsim::{Encoder, EncoderConfig};
use dilution_core::synth::{generate_cohort, CohortSpec};
use dilution_core::volumes::{load_mask, load_volume, preprocess, save_volume, CohortManifest};
use dilution_core::Execution;

use crate::args::*;
use crate::output::{csv_writer, prepare_dir, write_comparisons, write_json, write_table, RunConfig};
use crate::usage;

pub struct Context {
    pub execution: Execution,
    pub thread_cap: Option<usize>,
}

impl Context {
    pub fn record<T: Serialize>(&self, dir: &Path, command: &'static str, options: &T) -> anyhow::Result<()> {
        prepare_dir(dir)?;
        write_json(
            &dir.join("run_config.json"),
            &RunConfig {
                tool: "dilution-lab",
                version: env!("CARGO_PKG_VERSION"),
                command,
                sequential: self.execution == Execution::Sequential,
                thread_cap: self.thread_cap,
                options,
            },
        )
    }
}

fn dims(v: [usize; 3]) -> String {
    format!("{}x{}x{}", v[0], v[1], v[2])
}

fn load_manifest(path: &Path) -> anyhow::Result<CohortManifest> {
    let m = CohortManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    m.validate()?;
    Ok(m)
}

pub fn synth(ctx: &Context, a: SynthArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.b_fraction) {
        return Err(usage("--b-fraction must be in [0,1]"));
    }
    ctx.record(&a.out, "synth", &a)?;
    let spec = CohortSpec {
        cohort_id: format!("synth-{}", a.seed),
        n: a.n,
        in_plane: a.in_plane,
        z_distribution: a.z.clone(),
        subtype_mix: (a.b_fraction, 1.0 - a.b_fraction),
        seed: a.seed,
        predictions: a.predictions.clone(),
    };
    let m = generate_cohort(&spec, &a.out, ctx.execution)?;
    eprintln!("wrote {} scans to {}", m.scans.len(), a.out.display());
    Ok(())
}

pub fn geometry(ctx: &Context, mut a: GeometryArgs) -> anyhow::Result<()> {
    let crop = *a.crop.get_or_insert(a.profile.cubic_crop());
    let embed = *a.embed_dim.get_or_insert(a.profile.embed_dim());
    let grid = token_budget(crop, a.profile.patch(), a.profile.window(), 4)?;
    let compute = compute_estimate(&grid, embed, &a.profile.depths(), 4.0)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "stage",
        "extent",
        "tokens",
        "effective_window",
        "shift",
        "padded_extent",
        "padded_tokens",
        "windows",
        "window_pad_fraction",
        "window_pad_x",
        "window_pad_y",
        "window_pad_z",
        "macs",
    ])?;
    for (s, c) in grid.stages.iter().zip(&compute.stages) {
        w.write_record([
            s.stage.to_string(),
            dims(s.extent),
            s.tokens.to_string(),
            dims(s.effective_window),
            dims(s.shift),
            dims(s.padded_extent),
            s.padded_tokens.to_string(),
            s.windows.to_string(),
            format!("{:.6}", s.window_pad_fraction),
            s.axis_window_pad[0].to_string(),
            s.axis_window_pad[1].to_string(),
            s.axis_window_pad[2].to_string(),
            format!("{:.0}", c.total_macs),
        ])?;
    }
    let bytes = w.into_inner()?;
    match &a.out {
        Some(dir) => {
            ctx.record(dir, "geometry", &a)?;
            std::fs::write(dir.join("geometry.csv"), &bytes)?;
            write_json(&dir.join("compute.json"), &compute)?;
        }
        None => print!("{}", String::from_utf8(bytes)?),
    }
    Ok(())
}

fn encoder_config(e: &EncoderArgs) -> anyhow::Result<EncoderConfig> {
    let mut cfg = EncoderConfig::for_profile(e.profile, e.seed).with_embed_dim(e.embed_dim);
    cfg.mask_padding_keys = e.mask_padding_keys;
    cfg.validate().map_err(|err| usage(err.to_string()))?;
    Ok(cfg)
}

fn resolve_crop(e: &mut EncoderArgs) -> anyhow::Result<CropPlan> {
    let crop = *e.crop.get_or_insert(e.profile.cubic_crop());
    CropPlan::new(crop).map_err(|err| usage(err.to_string()))
}

pub fn simulate(ctx: &Context, mut a: SimulateArgs) -> anyhow::Result<()> {
    let plan = resolve_crop(&mut a.encoder)?;
    let cfg = encoder_config(&a.encoder)?;
    let manifest = load_manifest(&a.manifest)?;
    ctx.record(&a.out, "simulate", &a)?;
    let enc = Encoder::new(cfg.clone())?;
    let header = RattHeader::for_encoder(&cfg, plan.crop)?;
    let results = ctx.execution.map(&manifest.scans, |scan| -> anyhow::Result<()> {
        let mut image = load_volume(&manifest.image_path(scan))?;
        if !a.encoder.raw {
            image = preprocess(&image)?;
        }
        let (cropped, indicator) = plan.apply(&image);
        let path = a.out.join(format!("{}.ratt", scan.scan_id));
        let mut w = RattWriter::create(&path, &header)?;
        enc.forward(&cropped, &indicator, &mut w)?;
        w.finish()?;
        Ok(())
    });
    let mut failed = 0;
    for (scan, r) in manifest.scans.iter().zip(results) {
        if let Err(e) = r {
            failed += 1;
            eprintln!("{}: {e:#}", scan.scan_id);
        }
    }
    if failed > 0 {
        anyhow::bail!("{failed} of {} scans failed", manifest.scans.len());
    }
    Ok(())
}

fn write_adi_scans(path: &Path, report: &AdiReport) -> anyhow::Result<()> {
    let n_stages = report.stages.len();
    let mut header = vec!["scan_id".to_string(), "native_z".into(), "pf".into()];
    for s in 0..n_stages {
        for col in ["adi", "adi_window", "mass_rr", "mass_rp", "mass_rp_window"] {
            header.push(format!("{col}_s{s}"));
        }
    }
    header.extend(["sdsc".into(), "error".into()]);
    let mut w = csv_writer(path)?;
    w.write_record(&header)?;
    for scan in &report.scans {
        let mut row = vec![scan.scan_id.clone(), scan.native_z_extent.to_string(), scan.pf.to_string()];
        for s in 0..n_stages {
            match scan.stages.get(s) {
                Some(st) => row.extend([
                    st.adi.to_string(),
                    st.adi_window.to_string(),
                    st.breakdown.real_to_real.to_string(),
                    st.breakdown.real_to_pad.to_string(),
                    st.breakdown.real_to_window_pad.to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 5)),
            }
        }
        row.push(scan.sdsc.map(|v| v.to_string()).unwrap_or_default());
        row.push(scan.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AdiSummary<'a> {
    n_scans: usize,
    n_failed: usize,
    stages: &'a [dilution_core::adi::StageSummary],
    pf_vs_last_stage: &'a Option<dilution_core::metrics::Correlation>,
    correlation_undefined: bool,
    last_stage_vs_sdsc: &'a Option<dilution_core::metrics::Correlation>,
    pf_vs_sdsc: &'a Option<dilution_core::metrics::Correlation>,
    errors: BTreeMap<&'a str, &'a str>,
}

pub fn adi(ctx: &Context, mut a: AdiArgs) -> anyhow::Result<()> {
    let plan = resolve_crop(&mut a.encoder)?;
    let cfg = encoder_config(&a.encoder)?;
    let manifest = load_manifest(&a.manifest)?;
    ctx.record(&a.out, "adi", &a)?;
    let settings = AdiSettings {
        source: match &a.attn_dump {
            Some(dir) => AttentionSource::Dumps(dir.clone()),
            None => AttentionSource::Simulate(cfg),
        },
        plan,
        preprocess: !a.encoder.raw,
        sdsc_config: a.sdsc_config.clone(),
        execution: ctx.execution,
    };
    let report = cohort_analysis(&manifest, &settings)?;
    write_adi_scans(&a.out.join("adi_scans.csv"), &report)?;
    let summary = AdiSummary {
        n_scans: report.scans.len(),
        n_failed: report.n_failed,
        stages: &report.stages,
        pf_vs_last_stage: &report.pf_vs_last_stage,
        correlation_undefined: report.correlation_undefined,
        last_stage_vs_sdsc: &report.last_stage_vs_sdsc,
        pf_vs_sdsc: &report.pf_vs_sdsc,
        errors: report
            .scans
            .iter()
            .filter_map(|s| s.error.as_deref().map(|e| (s.scan_id.as_str(), e)))
            .collect(),
    };
    write_json(&a.out.join("adi_summary.json"), &summary)?;
    if report.n_failed > 0 {
        for (id, e) in &summary.errors {
            eprintln!("{id}: {e}");
        }
        anyhow::bail!("{} of {} scans failed", report.n_failed, report.scans.len());
    }
    Ok(())
}

pub fn augment(ctx: &Context, a: AugmentArgs) -> anyhow::Result<()> {
    let params = AugmentParams {
        alpha_range: a.alpha,
        beta_range: a.beta,
        probability: a.probability,
        seed: a.seed,
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    let v = load_volume(&a.input)?;
    let m = load_mask(&a.mask)?;
    ctx.record(&a.out, "augment", &a)?;
    let mut aug = TumorAugmenter::new(params)?;
    let mut log = csv_writer(&a.out.join("augment_log.csv"))?;
    log.write_record(["variant", "applied", "alpha", "beta"])?;
    for i in 0..a.n {
        let (out, o) = aug.augment(&v, &m)?;
        let name = format!("variant_{i:03}");
        save_volume(&out, &a.out.join(&name))?;
        log.write_record([name, o.applied.to_string(), o.alpha.to_string(), o.beta.to_string()])?;
    }
    log.flush()?;
    Ok(())
}

fn manifest_features(ctx: &Context, manifest: &CohortManifest) -> anyhow::Result<Vec<AppearanceFeatures>> {
    let feats = ctx.execution.map(&manifest.scans, |s| -> anyhow::Result<AppearanceFeatures> {
        let v = preprocess(&load_volume(&manifest.image_path(s))?)?;
        let m = load_mask(&manifest.mask_path(s))?;
        subtypes::extract_features(&v, &m).with_context(|| format!("features of {}", s.scan_id))
    });
    feats.into_iter().collect()
}

fn write_assignments(
    path: &Path,
    manifest: &CohortManifest,
    model: &SubtypeModel,
    feats: &[AppearanceFeatures],
) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["scan_id", "cluster", "subtype", "reference_subtype"])?;
    for (s, f) in manifest.scans.iter().zip(feats) {
        let c = model.assign_cluster(f)?;
        w.write_record([
            s.scan_id.clone(),
            c.to_string(),
            model.centroid_labels[c].to_string(),
            s.subtype.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cluster(ctx: &Context, a: ClusterArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    ctx.record(&a.out, "cluster", &a)?;
    let feats = manifest_features(ctx, &manifest)?;
    let model = if a.fit {
        let opts = FitOptions {
            k_min: a.k_min,
            k_max: a.k_max,
            seed: a.seed,
            execution: ctx.execution,
            ..FitOptions::default()
        };
        let report = subtypes::fit(&feats, &opts)?;
        let mut w = csv_writer(&a.out.join("validity.csv"))?;
        w.write_record(["k", "inertia", "silhouette", "calinski_harabasz", "davies_bouldin"])?;
        for r in &report.validity {
            w.write_record([
                r.k.to_string(),
                r.inertia.to_string(),
                r.silhouette.to_string(),
                r.calinski_harabasz.to_string(),
                r.davies_bouldin.to_string(),
            ])?;
        }
        w.flush()?;
        write_json(
            &a.out.join("cluster_summary.json"),
            &serde_json::json!({
                "votes": report.votes,
                "consensus_k": report.votes.consensus(),
                "unanimous": report.votes.unanimous(),
                "dropped_features": report.dropped_features,
            }),
        )?;
        report.model.save(&a.model)?;
        report.model
    } else {
        SubtypeModel::load(&a.model)?
    };
    write_assignments(&a.out.join("assignments.csv"), &manifest, &model, &feats)
}

pub fn cka(ctx: &Context, a: CkaArgs) -> anyhow::Result<()> {
    if a.batch < 4 && !a.full {
        return Err(usage("--batch must be at least 4"));
    }
    let da = cka::load_dump(&a.a)?;
    let db = cka::load_dump(&a.b)?;
    ctx.record(&a.out, "cka", &a)?;
    let opts = CkaOptions {
        estimator: if a.biased { Estimator::Biased } else { Estimator::Unbiased },
        batch: if a.full { None } else { Some(a.batch) },
        execution: ctx.execution,
    };
    let h = cka::layer_heatmap(&da, &db, &opts)?;
    let mut w = csv_writer(&a.out.join("heatmap.csv"))?;
    let mut header = vec!["layer_a".to_string()];
    header.extend(h.layers_b.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in h.layers_a.iter().zip(&h.values) {
        let mut r = vec![id.clone()];
        r.extend(row.iter().map(f64::to_string));
        w.write_record(&r)?;
    }
    w.flush()?;
    if let (Some(d), Some(drift)) = (&h.diagonal, &h.drift) {
        let mut w = csv_writer(&a.out.join("diagonal.csv"))?;
        w.write_record(["layer_a", "layer_b", "cka", "drift"])?;
        for i in 0..d.len() {
            w.write_record([
                h.layers_a[i].clone(),
                h.layers_b[i].clone(),
                d[i].to_string(),
                drift[i].to_string(),
            ])?;
        }
        w.flush()?;
    }
    for msg in &h.warnings {
        eprintln!("warning: {msg}");
    }
    write_json(&a.out.join("cka_summary.json"), &serde_json::json!({ "warnings": h.warnings }))
}

pub fn eval(ctx: &Context, a: EvalArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    for cfg in &a.pred_configs {
        if !manifest.predictions.contains_key(cfg) {
            return Err(usage(format!("manifest has no predictions for {cfg:?}")));
        }
    }
    ctx.record(&a.out, "eval", &a)?;
    let mut records: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for cfg in &a.pred_configs {
        let rows = ctx.execution.map(&manifest.scans, |s| -> anyhow::Result<EvalRecord> {
            let path = manifest
                .prediction_path(cfg, &s.scan_id)
                .ok_or_else(|| anyhow::anyhow!("no {cfg} prediction for {}", s.scan_id))?;
            let pred = load_mask(&path)?;
            let reference = load_mask(&manifest.mask_path(s))?;
            Ok(evaluate_scan(&s.scan_id, cfg, &pred, &reference, s.subtype, a.tolerance_mm)?)
        });
        records.insert(cfg.clone(), rows.into_iter().collect::<anyhow::Result<_>>()?);
    }
    let mut w = csv_writer(&a.out.join("eval_scans.csv"))?;
    for r in records.values().flatten() {
        w.serialize(r)?;
    }
    w.flush()?;
    let penalty = PenaltyPolicy {
        sdsc: a.penalty_sdsc,
        volume_ratio: a.penalty_vr,
    };
    let stats = aggregate(&records, penalty)?;
    write_json(&a.out.join("eval_cohort.json"), &stats)?;
    write_table(&a.out.join("table.csv"), &stats)?;
    write_comparisons(&a.out.join("comparisons.csv"), &stats)
}
