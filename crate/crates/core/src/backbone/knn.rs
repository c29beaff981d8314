//! k-nearest neighbours under L1 on min-max scaled numbers plus 0/1
//! categorical mismatch. Equidistant neighbours are taken in training order.

use rayon::prelude::*;

use super::{argmax, label_cell, value_cell, Encoder, FittedPredictor, Target, TrainingData};
use crate::error::{Error, Result};
use crate::table::{Cell, ColumnKind, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    encoder: Encoder,
    x: Vec<Vec<f64>>,
    target: Target,
    classes: Vec<String>,
    k: usize,
    /// `1 / (max - min)` per numeric feature, `1` when the range is zero.
    inv_range: Vec<f64>,
}

impl Knn {
    pub(crate) fn fit(data: TrainingData, k: usize) -> Result<Knn> {
        if k == 0 || k > data.x.len() {
            return Err(Error::Config(format!(
                "k = {k} must be between 1 and the training size {}",
                data.x.len()
            )));
        }
        let inv_range = (0..data.encoder.width())
            .map(|f| {
                let (lo, hi) = data
                    .x
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r[f]), hi.max(r[f]))
                    });
                if hi > lo {
                    1.0 / (hi - lo)
                } else {
                    1.0
                }
            })
            .collect();
        let classes = match &data.target {
            Target::Classes { names, .. } => names.clone(),
            Target::Values(_) => Vec::new(),
        };
        Ok(Knn {
            encoder: data.encoder,
            x: data.x,
            target: data.target,
            classes,
            k,
            inv_range,
        })
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut d = 0.0;
        for (f, kind) in self.encoder.kinds.iter().enumerate() {
            d += match kind {
                ColumnKind::Numerical => (a[f] - b[f]).abs() * self.inv_range[f],
                ColumnKind::Categorical => f64::from(u8::from(a[f] != b[f] || a[f] < 0.0)),
            };
        }
        d
    }

    /// Training indices of the `k` nearest rows, by `(distance, index)`.
    fn neighbors(&self, q: &[f64]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, r)| (self.distance(q, r), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, cmp);
            d.truncate(self.k);
        }
        d.sort_by(cmp);
        d.into_iter().map(|(_, i)| i).collect()
    }

    fn scores(&self, q: &[f64]) -> Vec<f64> {
        let nb = self.neighbors(q);
        match &self.target {
            Target::Classes { ids, names } => {
                let mut s = vec![0.0; names.len()];
                for i in nb {
                    s[ids[i]] += 1.0;
                }
                s.iter_mut().for_each(|v| *v /= self.k as f64);
                s
            }
            Target::Values(v) => vec![nb.iter().map(|&i| v[i]).sum::<f64>() / self.k as f64],
        }
    }
}

impl FittedPredictor for Knn {
    fn predict(&self, features: &Table) -> Result<Vec<Cell>> {
        let x = self.encoder.encode(features)?;
        let schema = &self.encoder.schema;
        Ok(x
            .par_iter()
            .map(|q| {
                let s = self.scores(q);
                if self.classes.is_empty() {
                    value_cell(s[0])
                } else {
                    label_cell(schema, &self.classes[argmax(&s)])
                }
            })
            .collect())
    }

    fn predict_scores(&self, features: &Table) -> Result<Option<Vec<Vec<f64>>>> {
        if self.classes.is_empty() {
            return Ok(None);
        }
        let x = self.encoder.encode(features)?;
        Ok(Some(x.par_iter().map(|q| self.scores(q)).collect()))
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }
}
