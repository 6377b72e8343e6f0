//! Multi-label evaluation: per-class average precision and the thresholded /
//! top-3 precision, recall and F1 variants, both per-class averaged (CP, CR,
//! CF1) and pooled over all decisions (OP, OR, OF1).

use std::fmt;
use std::str::FromStr;

use crate::error::{DidError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricMode {
    /// A class is predicted when its score reaches the threshold.
    #[default]
    All,
    /// The three highest-scoring classes of each image are predicted.
    Top3,
}

impl MetricMode {
    pub fn name(self) -> &'static str {
        match self {
            MetricMode::All => "all",
            MetricMode::Top3 => "top3",
        }
    }
}

impl FromStr for MetricMode {
    type Err = DidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MetricMode::All),
            "top3" => Ok(MetricMode::Top3),
            other => Err(DidError::Config(format!("unknown metric mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub mode: MetricMode,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mode={} mAP={:.4} CP={:.4} CR={:.4} CF1={:.4} OP={:.4} OR={:.4} OF1={:.4}",
            self.mode.name(),
            self.map,
            self.cp,
            self.cr,
            self.cf1,
            self.op,
            self.or,
            self.of1
        )
    }
}

/// Non-interpolated AP: rank by descending score (ties keep input order) and
/// average the precision at the rank of every positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(DidError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Which classes count as predicted for one image.
pub fn decisions(scores: &[f64], mode: MetricMode, threshold: f64) -> Vec<bool> {
    match mode {
        MetricMode::All => scores.iter().map(|&s| s >= threshold).collect(),
        MetricMode::Top3 => {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut picked = vec![false; scores.len()];
            for &i in order.iter().take(3) {
                picked[i] = true;
            }
            picked
        }
    }
}

/// `scores` and `labels` are `M` rows of `C` entries. Classes without any
/// positive label are left out of mAP; classes with a zero precision or recall
/// denominator contribute 0 to CP or CR.
pub fn compute_metrics(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    mode: MetricMode,
    threshold: f64,
) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(DidError::shape("compute_metrics", &[scores.len()], &[labels.len()]));
    }
    let classes = scores.first().map_or(0, Vec::len);
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != classes || l.len() != classes {
            return Err(DidError::shape("compute_metrics", &[s.len()], &[l.len()]));
        }
    }

    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut actual = vec![0usize; classes];
    for (s, l) in scores.iter().zip(labels) {
        for (c, (&p, &y)) in decisions(s, mode, threshold).iter().zip(l).enumerate() {
            predicted[c] += p as usize;
            actual[c] += y as usize;
            tp[c] += (p && y) as usize;
        }
    }

    let mut aps = Vec::with_capacity(classes);
    for c in 0..classes {
        if actual[c] == 0 {
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let lab: Vec<bool> = labels.iter().map(|l| l[c]).collect();
        aps.push(average_precision(&col, &lab)?);
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };

    let n = classes.max(1) as f64;
    let cp = (0..classes).map(|c| ratio(tp[c], predicted[c])).sum::<f64>() / n;
    let cr = (0..classes).map(|c| ratio(tp[c], actual[c])).sum::<f64>() / n;
    let total_tp: usize = tp.iter().sum();
    let op = ratio(total_tp, predicted.iter().sum());
    let or = ratio(total_tp, actual.iter().sum());
    Ok(MetricsReport {
        map,
        cp,
        cr,
        cf1: harmonic(cp, cr),
        op,
        or,
        of1: harmonic(op, or),
        mode,
    })
}
