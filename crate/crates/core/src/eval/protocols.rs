use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{csv_err, evaluate, write_report_files, MetricsReport, OVERALL};
use crate::data::{fnv1a, load_samples, split_dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::training::{train_on_samples, Strategy, TrainConfig, TrainHistory};

/// Hex fingerprint of every tensor's values (as `f32`), for report metadata.
pub fn params_fingerprint<T: Scalar>(params: &ParameterStore<T>) -> String {
    let mut bytes = Vec::with_capacity(params.num_elements() * 4);
    for (name, t) in params.iter() {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    format!("{:016x}", fnv1a(&bytes))
}

pub fn manifest_fingerprint(manifest: &DatasetManifest) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(serde_json::to_string(manifest)?.as_bytes())))
}

/// One row of the strategy table: DSC/mIoU under both transfer strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub center_id: String,
    pub n_samples: usize,
    pub finetune_dec_dsc: f64,
    pub finetune_dec_miou: f64,
    pub finetune_enc_dec_dsc: f64,
    pub finetune_enc_dec_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    /// Column groups, in table order.
    pub columns: Vec<String>,
    pub metrics: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub overall: ComparisonRow,
    pub decoder_only: MetricsReport,
    pub full: MetricsReport,
    pub histories: BTreeMap<String, TrainHistory>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl StrategyComparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows.iter().chain([&self.overall]) {
            w.serialize(r).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| Center | {dec} DSC | {dec} mIoU | {full} DSC | {full} mIoU |\n|---|---|---|---|---|\n",
            dec = Strategy::DecoderOnly.column(),
            full = Strategy::Full.column()
        );
        for r in self.rows.iter().chain([&self.overall]) {
            s.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                r.center_id,
                r.finetune_dec_dsc,
                r.finetune_dec_miou,
                r.finetune_enc_dec_dsc,
                r.finetune_enc_dec_miou
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_report_files(dir, &serde_json::to_string_pretty(self)?, &self.to_csv()?)
    }
}

fn comparison_rows(dec: &MetricsReport, full: &MetricsReport) -> Result<(Vec<ComparisonRow>, ComparisonRow)> {
    let pair = |a: &super::MetricsRow, b: &super::MetricsRow| ComparisonRow {
        center_id: a.center_id.clone(),
        n_samples: a.n_samples,
        finetune_dec_dsc: a.dsc,
        finetune_dec_miou: a.miou,
        finetune_enc_dec_dsc: b.dsc,
        finetune_enc_dec_miou: b.miou,
    };
    let rows = dec
        .rows
        .iter()
        .map(|a| {
            full.row(&a.center_id)
                .map(|b| pair(a, b))
                .ok_or_else(|| Error::Integrity(format!("center {} missing from a run", a.center_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, pair(&dec.overall, &full.overall)))
}

/// Finetunes `base` twice on the manifest's train split — once per
/// strategy, with identical seeds and steps — and evaluates both on the
/// test split (or the val split when there is no test split).
pub fn run_strategy_comparison<T: Scalar>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    manifest: &DatasetManifest,
    data_dir: &Path,
    base: &ParameterStore<T>,
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<StrategyComparison> {
    let train = load_samples(data_dir, &manifest.with_split(Split::Train))?;
    let val = load_samples(data_dir, &manifest.with_split(Split::Val))?;
    let eval_split = if manifest.count(Split::Test) > 0 { Split::Test } else { Split::Val };
    let eval_set = load_samples(data_dir, &manifest.with_split(eval_split))?;

    let mut meta = BTreeMap::from([
        ("protocol".to_string(), json!("strategy-comparison")),
        ("base_checkpoint".to_string(), json!(params_fingerprint(base))),
        ("manifest".to_string(), json!(manifest_fingerprint(manifest)?)),
        ("seed".to_string(), json!(tcfg.seed)),
        ("eval_split".to_string(), json!(eval_split.to_string())),
        ("total_steps".to_string(), json!(tcfg.total_steps)),
    ]);
    let mut reports = BTreeMap::new();
    let mut histories = BTreeMap::new();
    for strategy in Strategy::ALL {
        let run_cfg = TrainConfig {
            strategy,
            ..tcfg.clone()
        };
        let run_dir = out_dir.map(|d| d.join(strategy.label()));
        let outcome = train_on_samples(cfg, &run_cfg, &train, &val, base.clone(), run_dir.as_deref())?;
        let run_meta = BTreeMap::from([
            ("protocol".to_string(), json!("strategy-comparison")),
            ("strategy".to_string(), json!(strategy.label())),
            ("checkpoint".to_string(), json!(params_fingerprint(&outcome.params))),
            ("seed".to_string(), json!(tcfg.seed)),
        ]);
        meta.insert(
            format!("{}_checkpoint", strategy.label()),
            json!(params_fingerprint(&outcome.params)),
        );
        let report = evaluate(&outcome.params, cfg, &eval_set, "strategy-comparison", run_meta, jobs)?;
        reports.insert(strategy, report);
        histories.insert(strategy.label().to_string(), outcome.history);
    }
    let dec = reports.remove(&Strategy::DecoderOnly).expect("ran");
    let full = reports.remove(&Strategy::Full).expect("ran");
    let (rows, overall) = comparison_rows(&dec, &full)?;
    let cmp = StrategyComparison {
        columns: Strategy::ALL.iter().map(|s| s.column().to_string()).collect(),
        metrics: vec!["DSC".into(), "mIoU".into()],
        rows,
        overall,
        decoder_only: dec,
        full,
        histories,
        metadata: meta,
    };
    if let Some(dir) = out_dir {
        cmp.write(dir)?;
    }
    Ok(cmp)
}

/// Sample ids and image paths of each role, and their overlaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisjointnessAudit {
    pub train_samples: usize,
    pub val_samples: usize,
    pub held_out_samples: usize,
    pub overlapping_sample_ids: Vec<String>,
    pub overlapping_images: Vec<String>,
    pub passed: bool,
}

pub fn audit_disjointness(manifest: &DatasetManifest, held_out: &BTreeSet<String>) -> DisjointnessAudit {
    let (mut fit_ids, mut fit_imgs) = (BTreeSet::new(), BTreeSet::new());
    let (mut ho_ids, mut ho_imgs) = (BTreeSet::new(), BTreeSet::new());
    let (mut n_train, mut n_val, mut n_ho) = (0, 0, 0);
    for e in &manifest.entries {
        if held_out.contains(&e.center_id) {
            n_ho += 1;
            ho_ids.insert(e.sample_id.as_str());
            ho_imgs.insert(e.image_path.as_str());
        } else if matches!(e.split, Split::Train | Split::Val) {
            if e.split == Split::Train {
                n_train += 1;
            } else {
                n_val += 1;
            }
            fit_ids.insert(e.sample_id.as_str());
            fit_imgs.insert(e.image_path.as_str());
        }
    }
    let ids: Vec<String> = fit_ids.intersection(&ho_ids).map(|s| s.to_string()).collect();
    let imgs: Vec<String> = fit_imgs.intersection(&ho_imgs).map(|s| s.to_string()).collect();
    DisjointnessAudit {
        train_samples: n_train,
        val_samples: n_val,
        held_out_samples: n_ho,
        passed: ids.is_empty() && imgs.is_empty() && n_ho > 0,
        overlapping_sample_ids: ids,
        overlapping_images: imgs,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetResult {
    /// Held-out centers only; tagged `protocol = "cross-dataset"`.
    pub report: MetricsReport,
    pub in_domain: MetricsReport,
    pub audit: DisjointnessAudit,
    pub history: TrainHistory,
}

impl CrossDatasetResult {
    /// Held-out DSC/mIoU per model, one row per model.
    pub fn to_markdown(&self) -> String {
        format!(
            "| Model | held-out DSC | held-out mIoU |\n|---|---|---|\n| minipromptseg ({}) | {:.3} | {:.3} |\n",
            self.report.metadata.get("strategy").and_then(|v| v.as_str()).unwrap_or("?"),
            self.report.overall.dsc,
            self.report.overall.miou
        )
    }
}

/// Trains on `train_centers` (80/20 split within them) and evaluates the
/// untouched `held_out` centers without adaptation.
#[allow(clippy::too_many_arguments)]
pub fn run_cross_dataset<T: Scalar>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    manifest: &DatasetManifest,
    data_dir: &Path,
    train_centers: &BTreeSet<String>,
    held_out: &BTreeSet<String>,
    init: ParameterStore<T>,
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<CrossDatasetResult> {
    if train_centers.is_empty() || held_out.is_empty() {
        return Err(Error::Config("train and held-out center sets must be non-empty".into()));
    }
    let both: Vec<&String> = train_centers.intersection(held_out).collect();
    if !both.is_empty() {
        return Err(Error::Config(format!(
            "centers {both:?} are both training and held-out centers"
        )));
    }
    let known = manifest.centers();
    if let Some(c) = train_centers.iter().chain(held_out).find(|c| !known.contains(*c)) {
        return Err(Error::Config(format!("center {c} does not occur in the manifest")));
    }

    let mut fit = manifest.clone();
    fit.entries.retain(|e| train_centers.contains(&e.center_id));
    fit.entries.iter_mut().for_each(|e| e.split = Split::Train);
    let (fit, _warnings) = split_dataset(&fit, tcfg.train_fraction, tcfg.seed)?;
    let mut audited = fit.clone();
    audited
        .entries
        .extend(manifest.entries.iter().filter(|e| held_out.contains(&e.center_id)).cloned());
    let audit = audit_disjointness(&audited, held_out);
    if !audit.passed {
        return Err(Error::Integrity(format!(
            "held-out data leaks into training: ids {:?}, images {:?}",
            audit.overlapping_sample_ids, audit.overlapping_images
        )));
    }

    let train = load_samples(data_dir, &fit.with_split(Split::Train))?;
    let val = load_samples(data_dir, &fit.with_split(Split::Val))?;
    let held: Vec<_> = manifest.entries.iter().filter(|e| held_out.contains(&e.center_id)).collect();
    let held = load_samples(data_dir, &held)?;

    let outcome = train_on_samples(cfg, tcfg, &train, &val, init, out_dir)?;
    let ckpt = params_fingerprint(&outcome.params);
    let base_meta = BTreeMap::from([
        ("checkpoint".to_string(), json!(ckpt)),
        ("manifest".to_string(), json!(manifest_fingerprint(manifest)?)),
        ("seed".to_string(), json!(tcfg.seed)),
        ("strategy".to_string(), json!(tcfg.strategy.label())),
        ("train_centers".to_string(), json!(train_centers)),
        ("held_out_centers".to_string(), json!(held_out)),
    ]);
    let mut meta = base_meta.clone();
    meta.insert("protocol".into(), json!("cross-dataset"));
    let mut dmeta = base_meta;
    dmeta.insert("protocol".into(), json!("in-domain-val"));
    let in_domain = evaluate(&outcome.params, cfg, &val, "in-domain-val", dmeta, jobs)?;
    meta.insert("in_domain_val_dsc".into(), json!(in_domain.overall.dsc));
    meta.insert("in_domain_val_miou".into(), json!(in_domain.overall.miou));
    meta.insert("audit_passed".into(), json!(audit.passed));
    let report = evaluate(&outcome.params, cfg, &held, "cross-dataset", meta, jobs)?;
    debug_assert!(report.rows.iter().all(|r| r.center_id != OVERALL));

    let result = CrossDatasetResult {
        report,
        in_domain,
        audit,
        history: outcome.history,
    };
    if let Some(dir) = out_dir {
        result.report.write(dir)?;
        result.in_domain.write(&dir.join("in_domain"))?;
        let a = dir.join("audit.json");
        std::fs::write(&a, serde_json::to_string_pretty(&result.audit)? + "\n").map_err(|e| Error::io(&a, e))?;
    }
    Ok(result)
}
