//! One-pass evaluation: success and precision curves and comparison tables.
//!
//! The first frame is the initialization frame and is excluded.

use std::fmt::Write as _;

use crate::bbox::{iou, BoundingBox};
use crate::error::{Error, Result};

pub const SUCCESS_THRESHOLDS: usize = 101;
pub const PRECISION_THRESHOLDS: usize = 51;

/// IoU threshold `k / 100`.
pub fn success_threshold(k: usize) -> f64 {
    k as f64 / 100.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeReport {
    /// Fraction of frames with IoU strictly above `0.00, 0.01, …, 1.00`.
    pub success_curve: Vec<f64>,
    pub success_auc: f64,
    /// Fraction of frames with centre error at most `0, 1, …, 50` px.
    pub precision_curve: Vec<f64>,
    pub precision_at_20: f64,
    /// Frames scored.
    pub frames: usize,
}

fn scored_pairs<'a>(pred: &'a [BoundingBox], gt: &'a [BoundingBox]) -> Result<impl Iterator<Item = (&'a BoundingBox, &'a BoundingBox)>> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} predicted boxes but {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Validation("need at least one frame after the initialization frame".into()));
    }
    Ok(pred.iter().zip(gt).skip(1))
}

/// Success curve and its AUC (the mean of the curve).
pub fn success_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<(Vec<f64>, f64)> {
    let ious: Vec<f64> = scored_pairs(pred, gt)?.map(|(p, g)| iou(p, g)).collect();
    let n = ious.len() as f64;
    let curve: Vec<f64> = (0..SUCCESS_THRESHOLDS)
        .map(|k| {
            let t = success_threshold(k);
            ious.iter().filter(|&&v| v > t).count() as f64 / n
        })
        .collect();
    let auc = curve.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    Ok((curve, auc))
}

/// Precision curve and its value at 20 px.
pub fn precision_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<(Vec<f64>, f64)> {
    let errs: Vec<f64> = scored_pairs(pred, gt)?.map(|(p, g)| p.center_distance(g)).collect();
    let n = errs.len() as f64;
    let curve: Vec<f64> = (0..PRECISION_THRESHOLDS)
        .map(|t| errs.iter().filter(|&&e| e <= t as f64).count() as f64 / n)
        .collect();
    let p20 = curve[20];
    Ok((curve, p20))
}

/// Mean IoU over the scored frames.
pub fn mean_iou(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64> {
    let ious: Vec<f64> = scored_pairs(pred, gt)?.map(|(p, g)| iou(p, g)).collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn evaluate(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<OpeReport> {
    let (success_curve, success_auc) = success_curve(pred, gt)?;
    let (precision_curve, precision_at_20) = precision_curve(pred, gt)?;
    Ok(OpeReport {
        success_curve,
        success_auc,
        precision_curve,
        precision_at_20,
        frames: pred.len() - 1,
    })
}

/// Mean of per-run AUC and Pre@20 values (curves are averaged pointwise).
pub fn average_runs(runs: &[OpeReport]) -> Result<OpeReport> {
    let first = runs.first().ok_or_else(|| Error::InvalidArgument("no runs to average".into()))?;
    let n = runs.len() as f64;
    let mean_curve = |f: fn(&OpeReport) -> &Vec<f64>, len: usize| -> Vec<f64> {
        (0..len).map(|i| runs.iter().map(|r| f(r)[i]).sum::<f64>() / n).collect()
    };
    Ok(OpeReport {
        success_curve: mean_curve(|r| &r.success_curve, first.success_curve.len()),
        success_auc: runs.iter().map(|r| r.success_auc).sum::<f64>() / n,
        precision_curve: mean_curve(|r| &r.precision_curve, first.precision_curve.len()),
        precision_at_20: runs.iter().map(|r| r.precision_at_20).sum::<f64>() / n,
        frames: runs.iter().map(|r| r.frames).sum(),
    })
}

/// ASCII table of `(name, AUC, Pre@20)`, best AUC first, ties by name.
pub fn compare(runs: &[(String, OpeReport)]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    }
    let mut rows: Vec<&(String, OpeReport)> = runs.iter().collect();
    for (i, (a, _)) in runs.iter().enumerate() {
        if runs[..i].iter().any(|(b, _)| a == b) {
            return Err(Error::InvalidArgument(format!("duplicate run name `{a}`")));
        }
    }
    rows.sort_by(|(na, a), (nb, b)| b.success_auc.total_cmp(&a.success_auc).then_with(|| na.cmp(nb)));
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}", "name", "AUC", "Pre@20");
    for (name, r) in rows {
        let _ = writeln!(out, "{name:<width$}  {:>6.3}  {:>6.3}", r.success_auc, r.precision_at_20);
    }
    Ok(out)
}

/// Machine-readable curves: a `# success` block of `threshold value` lines
/// followed by a `# precision` block.
pub fn curve_file(r: &OpeReport) -> String {
    let mut out = String::from("# success\n");
    for (k, v) in r.success_curve.iter().enumerate() {
        let _ = writeln!(out, "{:.2} {v:.6}", success_threshold(k));
    }
    out.push_str("# precision\n");
    for (t, v) in r.precision_curve.iter().enumerate() {
        let _ = writeln!(out, "{t} {v:.6}");
    }
    out
}
