//! Training-loss weights and the evaluation suite: mean average
//! precision, per-class/overall precision-recall-F1 (threshold and top-k
//! modes), and the video metrics (pooled top-20 average precision,
//! precision at equal recall rate, top-1 hit rate).

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Scores and ground truth for a batch: `scores[b][k]` in [0,1],
/// `labels[b][k]` in {0,1}.
#[derive(Debug, Clone, Default)]
pub struct PredictionBatch {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
    pub ids: Vec<String>,
}

impl PredictionBatch {
    pub fn push(&mut self, id: impl Into<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<()> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "scores len {} vs labels len {}",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {s}")));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::MalformedInput("labels must be 0/1".into()));
        }
        self.ids.push(id.into());
        self.scores.push(scores);
        self.labels.push(labels);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Loss weights against class imbalance:
/// w_k = y_k * e^{beta (1 - p_k)} + (1 - y_k) * e^{beta p_k}.
pub fn class_weights(y: &[u8], priors: &[f64], beta: f64) -> Vec<f64> {
    y.iter()
        .zip(priors)
        .map(|(&yk, &pk)| {
            if yk == 1 {
                (beta * (1.0 - pk)).exp()
            } else {
                (beta * pk).exp()
            }
        })
        .collect()
}

/// Weighted binary cross-entropy for one example (plain scalar version;
/// the differentiable op lives on the graph).
pub fn weighted_bce(yhat: &[f64], y: &[u8], w: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    yhat.iter()
        .zip(y)
        .zip(w)
        .map(|((&p, &yk), &wk)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -wk * (f64::from(yk) * p.ln() + (1.0 - f64::from(yk)) * (1.0 - p).ln())
        })
        .sum()
}

/// Average precision for one class over examples, ranking by descending
/// score with ties broken by ascending example index. `None` when the
/// class has no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let num_pos = labels.iter().filter(|&&l| l == 1).count();
    if num_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / num_pos as f64)
}

/// Mean AP over classes with at least one positive; returns the mean and
/// the list of excluded (positive-free) classes.
pub fn mean_average_precision(batch: &PredictionBatch) -> (f64, Vec<usize>) {
    let n = batch.num_classes();
    let mut aps = Vec::new();
    let mut excluded = Vec::new();
    for k in 0..n {
        let scores: Vec<f64> = batch.scores.iter().map(|s| s[k]).collect();
        let labels: Vec<u8> = batch.labels.iter().map(|l| l[k]).collect();
        match average_precision(&scores, &labels) {
            Some(ap) => aps.push(ap),
            None => excluded.push(k),
        }
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    (map, excluded)
}

/// Prediction rule for the P/R/F1 metrics.
#[derive(Debug, Clone, Copy)]
pub enum PredictMode {
    /// Predict label k when score >= tau.
    Threshold(f64),
    /// Predict exactly the K highest-scored labels per example.
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfMetrics {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or_: f64,
    pub of1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class (CP/CR/CF1) and overall pooled (OP/OR/OF1) precision,
/// recall, F1. Zero denominators contribute 0.
pub fn prf_metrics(batch: &PredictionBatch, mode: PredictMode) -> PrfMetrics {
    let n = batch.num_classes();
    let mut predicted = vec![vec![0u8; n]; batch.len()];
    match mode {
        PredictMode::Threshold(tau) => {
            for (b, scores) in batch.scores.iter().enumerate() {
                for (k, &s) in scores.iter().enumerate() {
                    if s >= tau {
                        predicted[b][k] = 1;
                    }
                }
            }
        }
        PredictMode::TopK(k) => {
            for (b, scores) in batch.scores.iter().enumerate() {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&x, &y| {
                    scores[y]
                        .partial_cmp(&scores[x])
                        .expect("scores are finite")
                        .then(x.cmp(&y))
                });
                for &idx in order.iter().take(k) {
                    predicted[b][idx] = 1;
                }
            }
        }
    }
    let mut tp = vec![0u64; n];
    let mut fp = vec![0u64; n];
    let mut fnn = vec![0u64; n];
    for (pred, truth) in predicted.iter().zip(&batch.labels) {
        for k in 0..n {
            match (pred[k], truth[k]) {
                (1, 1) => tp[k] += 1,
                (1, 0) => fp[k] += 1,
                (0, 1) => fnn[k] += 1,
                _ => {}
            }
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut cp = 0.0;
    let mut cr = 0.0;
    for k in 0..n {
        cp += ratio(tp[k], tp[k] + fp[k]);
        cr += ratio(tp[k], tp[k] + fnn[k]);
    }
    cp /= n.max(1) as f64;
    cr /= n.max(1) as f64;
    let tp_all: u64 = tp.iter().sum();
    let fp_all: u64 = fp.iter().sum();
    let fn_all: u64 = fnn.iter().sum();
    let op = ratio(tp_all, tp_all + fp_all);
    let or_ = ratio(tp_all, tp_all + fn_all);
    PrfMetrics {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or_,
        of1: f1(op, or_),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoMetrics {
    pub gap: f64,
    pub hit1: f64,
    pub perr: f64,
    pub map: f64,
}

/// Number of predictions pooled per example for GAP.
pub const GAP_TOP_K: usize = 20;

/// Hit@1, PERR, mAP, and GAP over each example's top-20 predictions
/// pooled and ranked globally by score. The GAP denominator is the total
/// number of ground-truth positives across examples.
pub fn video_metrics(batch: &PredictionBatch) -> VideoMetrics {
    let n = batch.num_classes();
    let mut hit = 0usize;
    let mut perr_sum = 0.0;
    let mut perr_count = 0usize;
    let mut pooled: Vec<(f64, usize, u8)> = Vec::new(); // (score, tie index, correct)
    let mut total_positives = 0usize;
    let mut tie = 0usize;
    for (b, scores) in batch.scores.iter().enumerate() {
        let labels = &batch.labels[b];
        let truth_count = labels.iter().filter(|&&l| l == 1).count();
        total_positives += truth_count;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| {
            scores[y]
                .partial_cmp(&scores[x])
                .expect("scores are finite")
                .then(x.cmp(&y))
        });
        if let Some(&top) = order.first() {
            if labels[top] == 1 {
                hit += 1;
            }
        }
        if truth_count > 0 {
            let correct_in_top = order
                .iter()
                .take(truth_count)
                .filter(|&&k| labels[k] == 1)
                .count();
            perr_sum += correct_in_top as f64 / truth_count as f64;
            perr_count += 1;
        }
        for &k in order.iter().take(GAP_TOP_K.min(n)) {
            pooled.push((scores[k], tie, labels[k]));
            tie += 1;
        }
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    for (rank, &(_, _, correct)) in pooled.iter().enumerate() {
        if correct == 1 {
            hits += 1;
            ap_sum += hits as f64 / (rank + 1) as f64;
        }
    }
    let gap = if total_positives == 0 {
        0.0
    } else {
        ap_sum / total_positives as f64
    };
    let (map, _) = mean_average_precision(batch);
    VideoMetrics {
        gap,
        hit1: if batch.is_empty() {
            0.0
        } else {
            hit as f64 / batch.len() as f64
        },
        perr: if perr_count == 0 {
            0.0
        } else {
            perr_sum / perr_count as f64
        },
        map,
    }
}

/// A metric report: ordered key -> value, plus a rendered table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn set(&mut self, key: &str, value: f64) {
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Flat machine-readable `metric=value` lines.
    pub fn write_kv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (k, v) in &self.values {
            writeln!(f, "{k}={v:.17}")?;
        }
        Ok(())
    }

    pub fn read_kv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut report = Self::default();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metric line '{line}'")))?;
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad metric value '{v}'")))?;
            report.values.insert(k.to_string(), value);
        }
        Ok(report)
    }

    /// Human-readable two-column table.
    pub fn write_table(&self, path: &Path) -> Result<()> {
        let width = self.values.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{:<width$}  value", "metric")?;
        writeln!(f, "{}  {}", "-".repeat(width), "-".repeat(8))?;
        for (k, v) in &self.values {
            writeln!(f, "{k:<width$}  {v:.6}")?;
        }
        Ok(())
    }
}
