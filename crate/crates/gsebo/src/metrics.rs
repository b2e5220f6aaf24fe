//! Evaluation helpers: masked accuracy, per-edge strength summaries, and
//! multi-run aggregation.

use crate::autodiff::{DenseMatrix, SparsePattern};
use crate::error::{Error, Result};
use crate::model::StrengthParam;

/// Fraction of masked nodes whose argmax logit matches the label. Ties go
/// to the lowest class index.
pub fn accuracy(logits: &DenseMatrix, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("one label per logit row required"));
    }
    if mask.is_empty() {
        return Err(Error::contract("accuracy over an empty mask"));
    }
    let mut hits = 0usize;
    for &i in mask {
        if i >= logits.rows() {
            return Err(Error::contract(format!("mask index {} out of range", i)));
        }
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / mask.len() as f64)
}

/// Mean clamped strength over non-loop entries, split by whether the
/// endpoints share a label. A side is `None` when its partition is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthSummary {
    pub intra_mean: Option<f64>,
    pub inter_mean: Option<f64>,
}

pub fn z_strength_summary(
    pattern: &SparsePattern,
    z: &StrengthParam,
    labels: &[usize],
) -> Result<StrengthSummary> {
    if z.values.len() != pattern.nnz() {
        return Err(Error::shape("strength vector does not match pattern"));
    }
    if labels.len() != pattern.n() {
        return Err(Error::shape("one label per node required"));
    }
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for (e, (i, j)) in pattern.entries().enumerate() {
        if i == j {
            continue;
        }
        let s = z.values[e].max(0.0).min(1.0);
        if labels[i] == labels[j] {
            intra = (intra.0 + s, intra.1 + 1);
        } else {
            inter = (inter.0 + s, inter.1 + 1);
        }
    }
    let mean = |(sum, count): (f64, usize)| {
        if count == 0 { None } else { Some(sum / count as f64) }
    };
    Ok(StrengthSummary { intra_mean: mean(intra), inter_mean: mean(inter) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    pub mean: f64,
    pub stddev: f64,
}

/// Sample mean and stddev (n-1 denominator); a single run has stddev 0.
pub fn aggregate_runs(values: &[f64]) -> Result<RunStats> {
    if values.is_empty() {
        return Err(Error::contract("aggregate over zero runs"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stddev = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunStats { mean, stddev })
}
