use std::io::Write;

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Center-error thresholds `0..=50` px.
pub const PRECISION_THRESHOLDS: usize = 51;
/// IoU thresholds `i / 50` for `i = 0..=50`.
pub const SUCCESS_THRESHOLDS: usize = 51;
pub const PRECISION_RADIUS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Fraction of frames with center error `<= i` px.
    pub precision_curve: Vec<f64>,
    pub precision_at_20: f64,
    /// Fraction of frames with IoU `>= i / 50`.
    pub success_curve: Vec<f64>,
    pub success_auc: f64,
    pub mean_exit_layer: Option<f64>,
    pub mean_flops: Option<f64>,
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_THRESHOLDS - 1) as f64
}

pub fn evaluate(pred: &[BBox], gt: &[BBox]) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let n = pred.len() as f64;
    let mut errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
    let mut ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    errors.sort_by(f64::total_cmp);
    ious.sort_by(f64::total_cmp);
    let precision_curve: Vec<f64> = (0..PRECISION_THRESHOLDS)
        .map(|t| errors.partition_point(|&e| e <= t as f64) as f64 / n)
        .collect();
    let success_curve: Vec<f64> = (0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let t = success_threshold(i);
            (ious.len() - ious.partition_point(|&v| v < t)) as f64 / n
        })
        .collect();
    let success_auc = success_curve.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    Ok(MetricReport {
        precision_at_20: precision_curve[PRECISION_RADIUS],
        precision_curve,
        success_curve,
        success_auc,
        mean_exit_layer: None,
        mean_flops: None,
    })
}

impl MetricReport {
    /// Summary row then both curves, one `curve,threshold,value` record
    /// each.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        out.write_record(["metric", "threshold", "value"])?;
        out.write_record(["precision_at_20", "20", &self.precision_at_20.to_string()])?;
        out.write_record(["success_auc", "", &self.success_auc.to_string()])?;
        out.write_record(["mean_L_e", "", &opt(self.mean_exit_layer)])?;
        out.write_record(["mean_flops", "", &opt(self.mean_flops)])?;
        for (i, v) in self.precision_curve.iter().enumerate() {
            out.write_record(["precision", &i.to_string(), &v.to_string()])?;
        }
        for (i, v) in self.success_curve.iter().enumerate() {
            out.write_record(["success", &success_threshold(i).to_string(), &v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}
