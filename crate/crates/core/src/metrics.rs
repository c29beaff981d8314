//! Evaluation measures.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{Cell, ColumnKind, Row, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    R2,
    Auc,
    Coverage,
    AvgRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
    /// Number of rows scored.
    pub support: usize,
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "{a} predictions for {b} truth values"
        )));
    }
    Ok(())
}

/// Fraction of exact label matches (compared by cell text).
pub fn accuracy(predictions: &[Cell], truth: &[Cell]) -> Result<MetricValue> {
    same_len(predictions.len(), truth.len())?;
    if truth.is_empty() {
        return Err(Error::InvalidArgument("accuracy of zero rows".into()));
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| !t.is_missing() && p.text() == t.text())
        .count();
    Ok(MetricValue {
        kind: MetricKind::Accuracy,
        value: hits as f64 / truth.len() as f64,
        support: truth.len(),
    })
}

/// `1 - SS_res / SS_tot`, with `SS_tot` about the truth mean.
pub fn r2(predictions: &[f64], truth: &[f64]) -> Result<MetricValue> {
    same_len(predictions.len(), truth.len())?;
    if truth.len() < 2 {
        return Err(Error::InvalidArgument("r2 needs at least 2 values".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::InvalidArgument("r2 undefined for constant truth".into()));
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| (t - p) * (t - p))
        .sum();
    Ok(MetricValue {
        kind: MetricKind::R2,
        value: 1.0 - ss_res / ss_tot,
        support: truth.len(),
    })
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j share their mean
        let r = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

/// Mann-Whitney AUC: the probability that a random positive scores above a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<MetricValue> {
    same_len(scores.len(), positive.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::InvalidArgument("auc needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(MetricValue {
        kind: MetricKind::Auc,
        value: u / (np as f64 * nn as f64),
        support: scores.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    Num(f64),
    Cat(u32),
    Missing,
}

/// Row distance over feature columns: `|a - b| / range` for numbers (range
/// taken from the reference table, 1 when zero or unscaled), 0/1 mismatch
/// for categories, and 1 when exactly one side is missing.
#[derive(Debug, Clone)]
pub struct MixedDistance {
    features: Vec<usize>,
    kinds: Vec<ColumnKind>,
    ranges: Vec<f64>,
}

impl MixedDistance {
    pub fn new(reference: &Table, scaled: bool) -> Self {
        let features = reference.schema.feature_indices();
        let kinds = features.iter().map(|&j| reference.schema.column(j).kind).collect();
        let ranges = features
            .iter()
            .map(|&j| {
                if !scaled {
                    return 1.0;
                }
                let (lo, hi) = reference
                    .rows
                    .iter()
                    .filter_map(|r| r[j].as_f64())
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                if hi > lo {
                    hi - lo
                } else {
                    1.0
                }
            })
            .collect();
        MixedDistance {
            features,
            kinds,
            ranges,
        }
    }

    pub fn distance(&self, a: &Row, b: &Row) -> f64 {
        let mut d = 0.0;
        for (f, &j) in self.features.iter().enumerate() {
            d += match (&a[j], &b[j]) {
                (Cell::Missing, Cell::Missing) => 0.0,
                (Cell::Missing, _) | (_, Cell::Missing) => 1.0,
                (x, y) => match self.kinds[f] {
                    ColumnKind::Numerical => {
                        (x.as_f64().unwrap_or(0.0) - y.as_f64().unwrap_or(0.0)).abs() / self.ranges[f]
                    }
                    ColumnKind::Categorical => f64::from(u8::from(x.text() != y.text())),
                },
            };
        }
        d
    }

    /// Rows pre-encoded for fast repeated distance computation; categorical
    /// values are interned through `ids`.
    fn encode(&self, table: &Table, ids: &mut HashMap<String, u32>) -> Vec<Vec<Coord>> {
        table
            .rows
            .iter()
            .map(|r| {
                self.features
                    .iter()
                    .enumerate()
                    .map(|(f, &j)| match (&r[j], self.kinds[f]) {
                        (Cell::Missing, _) => Coord::Missing,
                        (c, ColumnKind::Numerical) => Coord::Num(c.as_f64().unwrap_or(0.0)),
                        (c, ColumnKind::Categorical) => {
                            let n = ids.len() as u32;
                            Coord::Cat(*ids.entry(c.text().to_string()).or_insert(n))
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn encoded_distance(&self, a: &[Coord], b: &[Coord]) -> f64 {
        let mut d = 0.0;
        for (f, (x, y)) in a.iter().zip(b).enumerate() {
            d += match (x, y) {
                (Coord::Missing, Coord::Missing) => 0.0,
                (Coord::Missing, _) | (_, Coord::Missing) => 1.0,
                (Coord::Num(x), Coord::Num(y)) => (x - y).abs() / self.ranges[f],
                (x, y) => f64::from(u8::from(x != y)),
            };
        }
        d
    }
}

fn check_schemas(a: &Table, b: &Table) -> Result<()> {
    a.schema.check_compatible(&b.schema)
}

/// Distance from every synthetic row to its closest training row.
pub fn dcr_distribution(synth: &Table, train: &Table, scaled: bool) -> Result<Vec<f64>> {
    check_schemas(train, synth)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("DCR needs a non-empty training table".into()));
    }
    let md = MixedDistance::new(train, scaled);
    let mut ids = HashMap::new();
    let t = md.encode(train, &mut ids);
    let s = md.encode(synth, &mut ids);
    Ok(s.par_iter()
        .map(|row| {
            t.iter()
                .map(|r| md.encoded_distance(row, r))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// One value per line, for plotting elsewhere.
pub fn dcr_to_text(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}\n")).collect()
}

/// Fraction of real rows whose ball (radius: distance to the `k`-th nearest
/// other real row, inclusive) contains at least one synthetic row.
pub fn coverage(real: &Table, synth: &Table, k: usize, scaled: bool) -> Result<MetricValue> {
    check_schemas(real, synth)?;
    if real.is_empty() || synth.is_empty() {
        return Err(Error::InvalidArgument("coverage needs non-empty tables".into()));
    }
    if k == 0 || k >= real.len() {
        return Err(Error::InvalidArgument(format!(
            "coverage k = {k} must be in 1..{}",
            real.len()
        )));
    }
    let md = MixedDistance::new(real, scaled);
    let mut ids = HashMap::new();
    let r = md.encode(real, &mut ids);
    let s = md.encode(synth, &mut ids);
    let covered = (0..r.len())
        .into_par_iter()
        .filter(|&i| {
            let mut d: Vec<f64> = (0..r.len())
                .filter(|&j| j != i)
                .map(|j| md.encoded_distance(&r[i], &r[j]))
                .collect();
            let (_, radius, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            let radius = *radius;
            s.iter().any(|row| md.encoded_distance(&r[i], row) <= radius)
        })
        .count();
    Ok(MetricValue {
        kind: MetricKind::Coverage,
        value: covered as f64 / real.len() as f64,
        support: real.len(),
    })
}

/// Per-method `(mean rank, population std)` over datasets. `matrix[m][d]` is
/// method `m` on dataset `d`; rank 1 is the best, ties share the average.
pub fn average_rank(matrix: &[Vec<f64>], higher_is_better: bool) -> Result<Vec<(f64, f64)>> {
    if matrix.len() < 2 {
        return Err(Error::InvalidArgument("average rank needs >= 2 methods".into()));
    }
    let datasets = matrix[0].len();
    if datasets == 0 || matrix.iter().any(|m| m.len() != datasets) {
        return Err(Error::InvalidArgument("metric matrix is ragged or empty".into()));
    }
    if matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("metric matrix has missing entries".into()));
    }
    let mut ranks = vec![Vec::with_capacity(datasets); matrix.len()];
    for d in 0..datasets {
        let col: Vec<f64> = matrix
            .iter()
            .map(|m| if higher_is_better { -m[d] } else { m[d] })
            .collect();
        for (m, r) in average_ranks(&col).into_iter().enumerate() {
            ranks[m].push(r);
        }
    }
    Ok(ranks.iter().map(|r| mean_std(r)).collect())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
