use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};

use super::metrics::{overlap, Overlap};
use super::predict::predict_full_res;
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParameterStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub center_id: String,
    pub overlap: Overlap,
    pub dsc: f64,
    pub iou: f64,
}

impl SampleMetrics {
    pub fn new(sample_id: &str, center_id: &str, overlap: Overlap) -> Self {
        Self {
            sample_id: sample_id.into(),
            center_id: center_id.into(),
            overlap,
            dsc: overlap.dsc(),
            iou: overlap.iou(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub center_id: String,
    pub n_samples: usize,
    pub dsc: f64,
    /// Mean over samples of per-sample IoU.
    pub miou: f64,
}

/// Per-center and overall mean DSC / mIoU at original resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub rows: Vec<MetricsRow>,
    pub overall: MetricsRow,
    pub samples: Vec<SampleMetrics>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub const OVERALL: &str = "overall";

impl MetricsReport {
    /// Aggregates per-sample metrics. Samples are first ordered by id so the
    /// result does not depend on input order; the overall row is the
    /// sample-weighted mean of the per-center sums.
    pub fn from_samples(
        mut samples: Vec<SampleMetrics>,
        protocol: &str,
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("evaluation selected no samples".into()));
        }
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(a.center_id.cmp(&b.center_id)));
        let mut sums: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
        for s in &samples {
            let e = sums.entry(&s.center_id).or_default();
            e.0 += 1;
            e.1 += s.dsc;
            e.2 += s.iou;
        }
        let rows = sums
            .iter()
            .map(|(c, &(n, d, i))| MetricsRow {
                center_id: c.to_string(),
                n_samples: n,
                dsc: d / n as f64,
                miou: i / n as f64,
            })
            .collect();
        let (n, d, i) = sums
            .values()
            .fold((0, 0.0, 0.0), |acc, &(n, d, i)| (acc.0 + n, acc.1 + d, acc.2 + i));
        let overall = MetricsRow {
            center_id: OVERALL.into(),
            n_samples: n,
            dsc: d / n as f64,
            miou: i / n as f64,
        };
        Ok(Self {
            protocol: protocol.into(),
            rows,
            overall,
            samples,
            metadata,
        })
    }

    pub fn row(&self, center: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.center_id == center)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows.iter().chain([&self.overall]) {
            w.serialize(r).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Center | n | DSC | mIoU |\n|---|---|---|---|\n");
        for r in self.rows.iter().chain([&self.overall]) {
            s.push_str(&format!(
                "| {} | {} | {:.3} | {:.3} |\n",
                r.center_id, r.n_samples, r.dsc, r.miou
            ));
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_report_files(dir, &serde_json::to_string_pretty(self)?, &self.to_csv()?)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

pub(crate) fn write_report_files(dir: &Path, json: &str, csv: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let j = dir.join("report.json");
    fs::write(&j, format!("{json}\n")).map_err(|e| Error::io(&j, e))?;
    let c = dir.join("report.csv");
    fs::write(&c, csv).map_err(|e| Error::io(&c, e))
}

/// Per-sample metrics of the model's predictions, computed on up to `jobs`
/// threads.
pub fn evaluate_samples<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    samples: &[SegmentationSample],
    jobs: usize,
) -> Result<Vec<SampleMetrics>> {
    let one = |s: &SegmentationSample| -> Result<SampleMetrics> {
        let pred = predict_full_res(params, cfg, s)?;
        Ok(SampleMetrics::new(&s.sample_id, &s.center_id, overlap(&pred, &s.mask)?))
    };
    let workers = jobs.clamp(1, samples.len().max(1));
    if workers == 1 {
        return samples.iter().map(one).collect();
    }
    let chunk = samples.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    samples: &[SegmentationSample],
    protocol: &str,
    metadata: BTreeMap<String, serde_json::Value>,
    jobs: usize,
) -> Result<MetricsReport> {
    MetricsReport::from_samples(evaluate_samples(params, cfg, samples, jobs)?, protocol, metadata)
}

/// Oracle mode: every prediction is the ground truth itself.
pub fn evaluate_oracle(samples: &[SegmentationSample], protocol: &str) -> Result<MetricsReport> {
    let rows = samples
        .iter()
        .map(|s| Ok(SampleMetrics::new(&s.sample_id, &s.center_id, overlap(&s.mask, &s.mask)?)))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_samples(rows, protocol, BTreeMap::new())
}
