//! Airway metrics, t-tests and cohort summaries.
//!
//! Percentages are in `[0, 100]` (leakage and false positives can exceed
//! 100), Dice is a fraction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::morphology::skeletonize;
use crate::volume::Volume3D;

fn same_dims(a: &Volume3D, b: &Volume3D, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn count_and(a: &Volume3D, b: &Volume3D) -> usize {
    a.data().iter().zip(b.data()).filter(|(x, y)| **x != 0.0 && **y != 0.0).count()
}

fn count_and_not(a: &Volume3D, b: &Volume3D) -> usize {
    a.data().iter().zip(b.data()).filter(|(x, y)| **x != 0.0 && **y == 0.0).count()
}

/// Removes the central airways from both masks.
pub fn exclude_central(pred: &Volume3D, gt: &Volume3D, central: &Volume3D) -> Result<(Volume3D, Volume3D)> {
    same_dims(pred, gt, "exclude_central")?;
    same_dims(pred, central, "exclude_central")?;
    Ok((pred.and_not(central)?, gt.and_not(central)?))
}

/// Share of ground-truth centerline voxels inside the prediction.
pub fn tree_length(pred: &Volume3D, gt_centerline: &Volume3D) -> Result<f64> {
    same_dims(pred, gt_centerline, "tree_length")?;
    let n = gt_centerline.count_nonzero();
    if n == 0 {
        return Err(Error::Metric("ground-truth centerline is empty".into()));
    }
    Ok(100.0 * count_and(gt_centerline, pred) as f64 / n as f64)
}

/// Predicted centerline voxels outside the ground truth, relative to the
/// ground-truth centerline length.
pub fn centerline_leakage(pred_centerline: &Volume3D, gt: &Volume3D, gt_centerline: &Volume3D) -> Result<f64> {
    same_dims(pred_centerline, gt, "centerline_leakage")?;
    same_dims(gt, gt_centerline, "centerline_leakage")?;
    let n = gt_centerline.count_nonzero();
    if n == 0 {
        return Err(Error::Metric("ground-truth centerline is empty".into()));
    }
    Ok(100.0 * count_and_not(pred_centerline, gt) as f64 / n as f64)
}

/// False-positive voxels relative to the ground-truth volume.
pub fn false_positive_rate(pred: &Volume3D, gt: &Volume3D) -> Result<f64> {
    same_dims(pred, gt, "false_positive_rate")?;
    let n = gt.count_nonzero();
    if n == 0 {
        return Err(Error::Metric("ground truth is empty".into()));
    }
    Ok(100.0 * count_and_not(pred, gt) as f64 / n as f64)
}

/// `2|P ∧ G| / (|P| + |G|)`; undefined (an error) when both are empty.
pub fn dice(pred: &Volume3D, gt: &Volume3D) -> Result<f64> {
    same_dims(pred, gt, "dice")?;
    let total = pred.count_nonzero() + gt.count_nonzero();
    if total == 0 {
        return Err(Error::Metric("dice of two empty masks".into()));
    }
    Ok(2.0 * count_and(pred, gt) as f64 / total as f64)
}

/// Covered centerline voxels times the geometric mean voxel size, in mm.
pub fn total_tree_length(pred: &Volume3D, gt_centerline: &Volume3D, spacing: [f64; 3]) -> Result<f64> {
    same_dims(pred, gt_centerline, "total_tree_length")?;
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Metric(format!("non-positive spacing {spacing:?}")));
    }
    let voxel = (spacing[0] * spacing[1] * spacing[2]).cbrt();
    Ok(count_and(gt_centerline, pred) as f64 * voxel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scan: String,
    pub tree_length: f64,
    pub centerline_leakage: f64,
    pub false_positive_rate: f64,
    pub dice: f64,
    pub total_tree_length_mm: f64,
}

pub const CSV_HEADER: &str = "scan,tree_length,centerline_leakage,false_positive_rate,dice,total_tree_length_mm";

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.scan,
            self.tree_length,
            self.centerline_leakage,
            self.false_positive_rate,
            self.dice,
            self.total_tree_length_mm
        )
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::TreeLength => self.tree_length,
            Metric::CenterlineLeakage => self.centerline_leakage,
            Metric::FalsePositiveRate => self.false_positive_rate,
            Metric::Dice => self.dice,
            Metric::TotalTreeLength => self.total_tree_length_mm,
        }
    }
}

/// Column-ordered CSV, one row per record.
pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Parses what [`records_to_csv`] writes.
pub fn records_from_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(Error::Config(format!("unexpected metrics header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!("metrics row needs 6 fields: {l}")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("{s:?}: {e}")));
            Ok(MetricRecord {
                scan: f[0].to_string(),
                tree_length: num(f[1])?,
                centerline_leakage: num(f[2])?,
                false_positive_rate: num(f[3])?,
                dice: num(f[4])?,
                total_tree_length_mm: num(f[5])?,
            })
        })
        .collect()
}

/// Excludes the central airways, skeletonizes both masks and computes the
/// five metrics. Spacing is taken from `gt`.
pub fn evaluate_scan(scan: &str, pred: &Volume3D, gt: &Volume3D, central: &Volume3D) -> Result<MetricRecord> {
    let (p, g) = exclude_central(pred, gt, central)?;
    let pc = skeletonize(&p);
    let gc = skeletonize(&g);
    Ok(MetricRecord {
        scan: scan.to_string(),
        tree_length: tree_length(&p, &gc)?,
        centerline_leakage: centerline_leakage(&pc, &g, &gc)?,
        false_positive_rate: false_positive_rate(&p, &g)?,
        dice: dice(&p, &g)?,
        total_tree_length_mm: total_tree_length(&p, &gc, gt.spacing())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Student's t-test: on the differences when `paired`, otherwise the
/// pooled equal-variance two-sample form.
pub fn ttest(a: &[f64], b: &[f64], paired: bool) -> Result<TTest> {
    let (t, df) = if paired {
        if a.len() != b.len() || a.len() < 2 {
            return Err(Error::Degenerate(format!(
                "paired test needs equal lengths >= 2, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let (m, v) = mean_var(&d);
        if !(v > 0.0) {
            return Err(Error::Degenerate("paired differences have zero variance".into()));
        }
        let n = d.len() as f64;
        (m / (v / n).sqrt(), n - 1.0)
    } else {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::Degenerate(format!(
                "unpaired test needs two samples of >= 2, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let (ma, va) = mean_var(a);
        let (mb, vb) = mean_var(b);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
        if !(pooled > 0.0) {
            return Err(Error::Degenerate("both samples have zero variance".into()));
        }
        ((ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
    };
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, df, p })
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Quartiles {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Quartiles {
            median: percentile(&v, 0.5),
            p25: percentile(&v, 0.25),
            p75: percentile(&v, 0.75),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    TreeLength,
    CenterlineLeakage,
    FalsePositiveRate,
    Dice,
    TotalTreeLength,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::TreeLength,
        Metric::CenterlineLeakage,
        Metric::FalsePositiveRate,
        Metric::Dice,
        Metric::TotalTreeLength,
    ];

    /// Column name in the metrics CSV.
    pub fn name(self) -> &'static str {
        match self {
            Metric::TreeLength => "tree_length",
            Metric::CenterlineLeakage => "centerline_leakage",
            Metric::FalsePositiveRate => "false_positive_rate",
            Metric::Dice => "dice",
            Metric::TotalTreeLength => "total_tree_length_mm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub group: String,
    pub n: usize,
    pub tree_length: Quartiles,
    pub centerline_leakage: Quartiles,
    pub false_positive_rate: Quartiles,
    pub dice: Quartiles,
    pub total_tree_length_mm: Quartiles,
}

/// Median and quartiles of every metric per group, in input group order.
pub fn summarize(groups: &[(String, Vec<MetricRecord>)]) -> Result<Vec<CohortSummary>> {
    groups
        .iter()
        .map(|(name, recs)| {
            if recs.is_empty() {
                return Err(Error::Metric(format!("group {name:?} has no records")));
            }
            let q = |m: Metric| Quartiles::of(&recs.iter().map(|r| r.get(m)).collect::<Vec<_>>());
            Ok(CohortSummary {
                group: name.clone(),
                n: recs.len(),
                tree_length: q(Metric::TreeLength),
                centerline_leakage: q(Metric::CenterlineLeakage),
                false_positive_rate: q(Metric::FalsePositiveRate),
                dice: q(Metric::Dice),
                total_tree_length_mm: q(Metric::TotalTreeLength),
            })
        })
        .collect()
}
