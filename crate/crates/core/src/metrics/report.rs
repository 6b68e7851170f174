use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ncc, nmse, psnr, ssim3d, welch_t, SsimConfig};
use crate::error::{Error, Result};
use crate::volume::{crop, tumor_bbox, SegMask, Volume};

/// Voxels of padding around the segmentation foreground for tumor metrics.
pub const TUMOR_PAD: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Whole,
    Tumor,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Whole => "whole",
            Region::Tumor => "tumor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Nmse,
    Psnr,
    Ncc,
    Ssim,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [Self::Nmse, Self::Psnr, Self::Ncc, Self::Ssim];

    pub fn value(self, r: &CaseRecord) -> f64 {
        match self {
            Self::Nmse => r.nmse,
            Self::Psnr => r.psnr_db,
            Self::Ncc => r.ncc,
            Self::Ssim => r.ssim,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nmse => "nmse",
            Self::Psnr => "psnr_db",
            Self::Ncc => "ncc",
            Self::Ssim => "ssim",
        })
    }
}

/// Serializes non-finite floats as strings so JSON stays valid.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub region: Region,
    #[serde(with = "lenient_f64")]
    pub nmse: f64,
    #[serde(with = "lenient_f64")]
    pub psnr_db: f64,
    #[serde(with = "lenient_f64")]
    pub ncc: f64,
    #[serde(with = "lenient_f64")]
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CaseRecord {
    fn compute(case_id: &str, region: Region, pred: &Volume, gt: &Volume, cfg: &SsimConfig) -> Result<Self> {
        Ok(Self {
            case_id: case_id.to_string(),
            region,
            nmse: nmse(pred, gt)?,
            psnr_db: psnr(pred, gt, cfg.dynamic_range)?,
            ncc: ncc(pred, gt)?,
            ssim: ssim3d(pred, gt, cfg)?,
            note: None,
        })
    }

    fn noted(case_id: &str, region: Region, note: String) -> Self {
        Self {
            case_id: case_id.to_string(),
            region,
            nmse: f64::NAN,
            psnr_db: f64::NAN,
            ncc: f64::NAN,
            ssim: f64::NAN,
            note: Some(note),
        }
    }
}

/// Whole-volume record, plus a tumor record on the padded foreground box
/// when a mask is given. Failures confined to the tumor crop are recorded
/// as a note on that record instead of aborting the case.
pub fn evaluate_case(
    case_id: &str,
    pred: &Volume,
    gt: &Volume,
    mask: Option<&SegMask>,
    cfg: &SsimConfig,
) -> Result<Vec<CaseRecord>> {
    pred.same_extents(gt)?;
    let mut out = vec![CaseRecord::compute(case_id, Region::Whole, pred, gt, cfg)?];
    if let Some(mask) = mask {
        if mask.extents() != gt.extents() {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} vs volume {:?}",
                mask.extents(),
                gt.extents()
            )));
        }
        let rec = tumor_bbox(mask, TUMOR_PAD, gt.extents())
            .and_then(|b| CaseRecord::compute(case_id, Region::Tumor, &crop(pred, &b)?, &crop(gt, &b)?, cfg));
        out.push(match rec {
            Ok(r) => r,
            Err(e @ Error::ShapeMismatch(_)) => return Err(e),
            Err(e) => CaseRecord::noted(case_id, Region::Tumor, e.code().to_string()),
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation over the finite values of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub region: Region,
    pub metric: MetricKind,
    #[serde(with = "lenient_f64")]
    pub mean: f64,
    #[serde(with = "lenient_f64")]
    pub std: f64,
    pub n: usize,
    /// Values left out of the mean: the `+inf` PSNR sentinel and NaN notes.
    pub excluded: usize,
}

impl Aggregate {
    fn compute(region: Region, metric: MetricKind, records: &[CaseRecord]) -> Self {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.region == region)
            .map(|r| metric.value(r))
            .collect();
        let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        let n = finite.len();
        let mean = if n == 0 { f64::NAN } else { finite.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            f64::NAN
        } else {
            (finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            region,
            metric,
            mean,
            std,
            n,
            excluded: vals.len() - n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestRecord {
    pub metric: MetricKind,
    pub region: Region,
    pub a: String,
    pub b: String,
    #[serde(with = "lenient_f64")]
    pub t: f64,
    #[serde(with = "lenient_f64")]
    pub dof: f64,
    #[serde(with = "lenient_f64")]
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub records: Vec<CaseRecord>,
    pub aggregates: Vec<Aggregate>,
    #[serde(default)]
    pub ttests: Vec<TTestRecord>,
}

impl MetricReport {
    /// Sorts records by (case_id, region) and computes cohort aggregates.
    pub fn new(label: impl Into<String>, mut records: Vec<CaseRecord>) -> Self {
        records.sort_by(|a, b| (&a.case_id, a.region).cmp(&(&b.case_id, b.region)));
        let mut aggregates = Vec::new();
        for region in [Region::Whole, Region::Tumor] {
            if records.iter().any(|r| r.region == region) {
                for metric in MetricKind::ALL {
                    aggregates.push(Aggregate::compute(region, metric, &records));
                }
            }
        }
        Self {
            label: label.into(),
            records,
            aggregates,
            ttests: Vec::new(),
        }
    }

    pub fn values(&self, metric: MetricKind, region: Region) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.region == region)
            .map(|r| metric.value(r))
            .filter(|v| v.is_finite())
            .collect()
    }

    pub fn aggregate(&self, metric: MetricKind, region: Region) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.metric == metric && a.region == region)
    }

    pub fn mean(&self, metric: MetricKind, region: Region) -> f64 {
        self.aggregate(metric, region).map_or(f64::NAN, |a| a.mean)
    }

    /// Welch tests of every metric in `region` between this report and `other`.
    pub fn compare(&self, other: &MetricReport, region: Region) -> Result<Vec<TTestRecord>> {
        MetricKind::ALL
            .iter()
            .map(|&metric| {
                let w = welch_t(&self.values(metric, region), &other.values(metric, region))?;
                Ok(TTestRecord {
                    metric,
                    region,
                    a: self.label.clone(),
                    b: other.label.clone(),
                    t: w.t,
                    dof: w.dof,
                    p: w.p,
                    significant: w.significant(),
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(["case_id", "region", "nmse", "psnr_db", "ncc", "ssim"])
            .map_err(fail)?;
        for r in &self.records {
            w.write_record([
                r.case_id.clone(),
                r.region.to_string(),
                r.nmse.to_string(),
                r.psnr_db.to_string(),
                r.ncc.to_string(),
                r.ssim.to_string(),
            ])
            .map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("json: {e}")))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json()?).map_err(|e| Error::io(&json_path, e))
    }
}
