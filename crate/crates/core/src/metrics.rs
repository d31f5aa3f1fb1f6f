//! Evaluation metrics between predicted and ground-truth masks.
//!
//! Cloud_shadow is the positive class throughout. Confusion counts consider
//! only pixels valid in both masks. AUROC is the Mann-Whitney rank
//! statistic — the probability that a random positive outranks a random
//! negative, ties counting one half — which equals trapezoidal integration
//! of the ROC curve. Average precision is the non-interpolated step sum
//! over descending-confidence prefixes (ties broken by descending
//! confidence, then ascending sample index). Metrics whose denominator is
//! empty (precision with no predicted positives, AUROC with single-class
//! truth, AP with no positives) are reported as absent rather than forced
//! to 0 or 1.
//!
//! Aggregation across scenes is macro by default — an unweighted mean of
//! each metric, matching a per-scene-then-average presentation — with
//! pixel-weighted micro aggregation available: micro re-derives the rates
//! from summed counts, and weights AUROC/AP by evaluated-pixel count (the
//! raw confidences needed for exact pooled rank statistics are no longer
//! present in a report).

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scene::mask::{MaskClass, MaskRaster};

/// Pixel counts with cloud_shadow as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn evaluated(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.evaluated() as f64
    }

    fn rate(num: usize, denom: usize) -> Option<f64> {
        (denom > 0).then(|| num as f64 / denom as f64)
    }

    /// Precision of the positive (cloud_shadow) class.
    pub fn precision_positive(&self) -> Option<f64> {
        Self::rate(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall_positive(&self) -> Option<f64> {
        Self::rate(self.true_pos, self.true_pos + self.false_neg)
    }

    /// Precision of the negative (clear) class.
    pub fn precision_negative(&self) -> Option<f64> {
        Self::rate(self.true_neg, self.true_neg + self.false_neg)
    }

    pub fn recall_negative(&self) -> Option<f64> {
        Self::rate(self.true_neg, self.true_neg + self.false_pos)
    }

    pub fn add(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

fn f1_of(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    }
}

/// Count agreements over pixels valid in both masks.
pub fn confusion(pred: &MaskRaster, truth: &MaskRaster) -> Result<Confusion> {
    contract!(
        pred.width() == truth.width() && pred.height() == truth.height(),
        "prediction {}x{} does not match truth {}x{}",
        pred.width(),
        pred.height(),
        truth.width(),
        truth.height()
    );
    let nodata = MaskClass::Nodata.code();
    let positive = MaskClass::CloudShadow.code();
    let mut counts = Confusion::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels().iter()) {
        if p == nodata || t == nodata {
            continue;
        }
        match (p == positive, t == positive) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, false) => counts.true_neg += 1,
            (false, true) => counts.false_neg += 1,
        }
    }
    if counts.evaluated() == 0 {
        return Err(Error::Data(
            "no pixel is valid in both prediction and truth".into(),
        ));
    }
    Ok(counts)
}

fn check_scores(confidences: &[f64], positives: &[bool]) -> Result<()> {
    contract!(
        confidences.len() == positives.len(),
        "{} confidences vs {} labels",
        confidences.len(),
        positives.len()
    );
    contract!(!confidences.is_empty(), "metric inputs are empty");
    contract!(
        confidences.iter().all(|c| c.is_finite()),
        "confidences must be finite"
    );
    Ok(())
}

/// Probability that a random positive outranks a random negative (ties
/// count one half), via average ranks. `None` when the truth is
/// single-class.
pub fn auroc(confidences: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    check_scores(confidences, positives)?;
    let pos = positives.iter().filter(|&&p| p).count();
    let neg = positives.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]));
    // average 1-based rank within each run of equal confidence
    let mut rank_sum_pos = 0.0_f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && confidences[order[j]] == confidences[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &k in &order[i..j] {
            if positives[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok(Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Non-interpolated average precision: mean of precision-at-k over the
/// positive samples, in descending-confidence order (ties by ascending
/// index). `None` when there are no positives.
pub fn average_precision(confidences: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    check_scores(confidences, positives)?;
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    let mut seen_pos = 0usize;
    let mut sum = 0.0_f64;
    for (k, &i) in order.iter().enumerate() {
        if positives[i] {
            seen_pos += 1;
            sum += seen_pos as f64 / (k + 1) as f64;
        }
    }
    Ok(Some(sum / total_pos as f64))
}

/// The full metric suite for one prediction/truth pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: Confusion,
    pub evaluated: usize,
    pub accuracy: f64,
    pub precision_cloud_shadow: Option<f64>,
    pub recall_cloud_shadow: Option<f64>,
    pub f1_cloud_shadow: Option<f64>,
    pub precision_clear: Option<f64>,
    pub recall_clear: Option<f64>,
    pub f1_clear: Option<f64>,
    pub auroc: Option<f64>,
    pub average_precision: Option<f64>,
}

impl MetricsReport {
    pub fn from_counts(
        counts: Confusion,
        auroc: Option<f64>,
        average_precision: Option<f64>,
    ) -> Self {
        let precision_cloud_shadow = counts.precision_positive();
        let recall_cloud_shadow = counts.recall_positive();
        let precision_clear = counts.precision_negative();
        let recall_clear = counts.recall_negative();
        MetricsReport {
            counts,
            evaluated: counts.evaluated(),
            accuracy: counts.accuracy(),
            precision_cloud_shadow,
            recall_cloud_shadow,
            f1_cloud_shadow: f1_of(precision_cloud_shadow, recall_cloud_shadow),
            precision_clear,
            recall_clear,
            f1_clear: f1_of(precision_clear, recall_clear),
            auroc,
            average_precision,
        }
    }

    /// Human-readable table; absent metrics print as `-`.
    pub fn to_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
        }
        let mut out = String::new();
        out.push_str(&format!(
            "pixels evaluated: {} (tp {} fp {} tn {} fn {})\n",
            self.evaluated,
            self.counts.true_pos,
            self.counts.false_pos,
            self.counts.true_neg,
            self.counts.false_neg
        ));
        out.push_str("class          precision  recall     f1\n");
        out.push_str(&format!(
            "clear          {:<10} {:<10} {:<10}\n",
            cell(self.precision_clear),
            cell(self.recall_clear),
            cell(self.f1_clear)
        ));
        out.push_str(&format!(
            "cloud_shadow   {:<10} {:<10} {:<10}\n",
            cell(self.precision_cloud_shadow),
            cell(self.recall_cloud_shadow),
            cell(self.f1_cloud_shadow)
        ));
        out.push_str(&format!(
            "accuracy {:.4}  auroc {}  ap {}\n",
            self.accuracy,
            cell(self.auroc),
            cell(self.average_precision)
        ));
        out
    }
}

/// Evaluate a predicted mask (optionally carrying confidences) against the
/// truth. AUROC/AP are computed over co-valid pixels when the prediction
/// has a confidence plane, and absent otherwise.
pub fn evaluate_masks(pred: &MaskRaster, truth: &MaskRaster) -> Result<MetricsReport> {
    let counts = confusion(pred, truth)?;
    let (mut roc, mut ap) = (None, None);
    if let Some(conf) = pred.confidence() {
        let nodata = MaskClass::Nodata.code();
        let positive = MaskClass::CloudShadow.code();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, (&p, &t)) in pred
            .labels()
            .iter()
            .zip(truth.labels().iter())
            .enumerate()
        {
            if p == nodata || t == nodata {
                continue;
            }
            scores.push(conf[i] as f64);
            labels.push(t == positive);
        }
        roc = auroc(&scores, &labels)?;
        ap = average_precision(&scores, &labels)?;
    }
    Ok(MetricsReport::from_counts(counts, roc, ap))
}

/// How to combine per-scene reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregateMode {
    /// Unweighted mean of each metric across scenes (the default
    /// presentation).
    Macro,
    /// Pool the pixel counts and re-derive rates; AUROC/AP become
    /// evaluated-pixel-weighted means.
    Micro,
}

/// Combine per-scene reports. Absent metrics are skipped (macro averages
/// run over the reports where the metric exists).
pub fn aggregate(reports: &[MetricsReport], mode: AggregateMode) -> Result<MetricsReport> {
    contract!(!reports.is_empty(), "cannot aggregate zero reports");
    let mut counts = Confusion::default();
    for r in reports {
        counts.add(&r.counts);
    }
    match mode {
        AggregateMode::Macro => {
            fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
                let present: Vec<f64> = values.flatten().collect();
                (!present.is_empty())
                    .then(|| present.iter().sum::<f64>() / present.len() as f64)
            }
            let accuracy =
                reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64;
            let precision_cloud_shadow =
                mean_present(reports.iter().map(|r| r.precision_cloud_shadow));
            let recall_cloud_shadow =
                mean_present(reports.iter().map(|r| r.recall_cloud_shadow));
            let precision_clear = mean_present(reports.iter().map(|r| r.precision_clear));
            let recall_clear = mean_present(reports.iter().map(|r| r.recall_clear));
            Ok(MetricsReport {
                counts,
                evaluated: counts.evaluated(),
                accuracy,
                precision_cloud_shadow,
                recall_cloud_shadow,
                f1_cloud_shadow: mean_present(reports.iter().map(|r| r.f1_cloud_shadow)),
                precision_clear,
                recall_clear,
                f1_clear: mean_present(reports.iter().map(|r| r.f1_clear)),
                auroc: mean_present(reports.iter().map(|r| r.auroc)),
                average_precision: mean_present(
                    reports.iter().map(|r| r.average_precision),
                ),
            })
        }
        AggregateMode::Micro => {
            fn weighted(
                reports: &[MetricsReport],
                get: impl Fn(&MetricsReport) -> Option<f64>,
            ) -> Option<f64> {
                let mut sum = 0.0;
                let mut weight = 0.0;
                for r in reports {
                    if let Some(v) = get(r) {
                        sum += v * r.evaluated as f64;
                        weight += r.evaluated as f64;
                    }
                }
                (weight > 0.0).then(|| sum / weight)
            }
            Ok(MetricsReport::from_counts(
                counts,
                weighted(reports, |r| r.auroc),
                weighted(reports, |r| r.average_precision),
            ))
        }
    }
}
