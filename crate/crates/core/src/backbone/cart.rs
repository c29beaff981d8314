//! CART with Gini (classification) or squared-error (regression) splits.
//!
//! Numeric splits are `x <= t` at midpoints between consecutive distinct
//! values; categorical splits are `x == c`. Candidates are scanned in
//! feature order, then by ascending threshold, and only a strictly better
//! impurity replaces the incumbent, so the first candidate wins ties. Impure
//! nodes split even without impurity gain (XOR needs a zero-gain root).
//! Samples are always visited sorted by `(value, target)`, which makes the
//! fitted tree independent of training-row order.

use super::{argmax, label_cell, value_cell, Encoder, FittedPredictor, Target, TrainingData};
use crate::error::{Error, Result};
use crate::table::{Cell, ColumnKind, Table};

const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
enum Split {
    Le(f64),
    Eq(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(Vec<f64>),
    Internal {
        feature: usize,
        split: Split,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cart {
    encoder: Encoder,
    classes: Vec<String>,
    root: Node,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    /// Class id or regression value per sample.
    y: Vec<f64>,
    n_classes: usize,
    max_depth: usize,
    min_leaf: usize,
    kinds: &'a [ColumnKind],
}

impl Cart {
    pub(crate) fn fit(data: TrainingData, max_depth: usize, min_leaf: usize) -> Result<Cart> {
        if min_leaf == 0 {
            return Err(Error::Config("min_leaf must be >= 1".into()));
        }
        let (y, classes) = match &data.target {
            Target::Classes { ids, names } => (ids.iter().map(|&i| i as f64).collect(), names.clone()),
            Target::Values(v) => (v.clone(), Vec::new()),
        };
        let b = Builder {
            x: &data.x,
            y,
            n_classes: classes.len(),
            max_depth,
            min_leaf,
            kinds: &data.encoder.kinds,
        };
        let all: Vec<usize> = (0..data.x.len()).collect();
        let root = b.build(&all, 0);
        Ok(Cart {
            encoder: data.encoder,
            classes,
            root,
        })
    }

    pub fn depth(&self) -> usize {
        fn d(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 0,
                Node::Internal { left, right, .. } => 1 + d(left).max(d(right)),
            }
        }
        d(&self.root)
    }

    fn leaf(&self, x: &[f64]) -> &[f64] {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(v) => return v,
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                } => {
                    let goes_left = match split {
                        Split::Le(t) => x[*feature] <= *t,
                        Split::Eq(c) => x[*feature] == *c,
                    };
                    node = if goes_left { left } else { right };
                }
            }
        }
    }
}

impl Builder<'_> {
    fn classification(&self) -> bool {
        self.n_classes > 0
    }

    /// Samples ordered by `(feature value, target)`.
    fn sorted(&self, idx: &[usize], f: usize) -> Vec<usize> {
        let mut s = idx.to_vec();
        s.sort_by(|&a, &b| {
            self.x[a][f]
                .total_cmp(&self.x[b][f])
                .then(self.y[a].total_cmp(&self.y[b]))
        });
        s
    }

    fn leaf(&self, idx: &[usize]) -> Node {
        if self.classification() {
            let mut h = vec![0.0; self.n_classes];
            for &i in idx {
                h[self.y[i] as usize] += 1.0;
            }
            let n = idx.len() as f64;
            h.iter_mut().for_each(|c| *c /= n);
            Node::Leaf(h)
        } else {
            let mut v: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
            v.sort_by(f64::total_cmp);
            Node::Leaf(vec![v.iter().sum::<f64>() / v.len() as f64])
        }
    }

    /// Impurity mass (n · impurity) of a sample multiset.
    fn impurity(&self, stats: &Stats) -> f64 {
        match stats {
            Stats::Counts(c, n) => {
                if *n == 0.0 {
                    0.0
                } else {
                    n - c.iter().map(|k| k * k).sum::<f64>() / n
                }
            }
            Stats::Moments { n, sum, sq } => {
                if *n == 0.0 {
                    0.0
                } else {
                    (sq - sum * sum / n).max(0.0)
                }
            }
        }
    }

    fn empty_stats(&self) -> Stats {
        if self.classification() {
            Stats::Counts(vec![0.0; self.n_classes], 0.0)
        } else {
            Stats::Moments {
                n: 0.0,
                sum: 0.0,
                sq: 0.0,
            }
        }
    }

    fn stats_of(&self, ordered: &[usize]) -> Stats {
        let mut s = self.empty_stats();
        for &i in ordered {
            s.add(self.y[i]);
        }
        s
    }

    fn build(&self, idx: &[usize], depth: usize) -> Node {
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return self.leaf(idx);
        }
        let parent = self.impurity(&self.stats_of(&self.sorted(idx, 0)));
        if parent <= MIN_GAIN {
            return self.leaf(idx);
        }
        let mut best: Option<(f64, usize, Split)> = None;
        for f in 0..self.kinds.len() {
            let ordered = self.sorted(idx, f);
            let candidates = match self.kinds[f] {
                ColumnKind::Numerical => self.numeric_candidates(&ordered, f),
                ColumnKind::Categorical => self.categorical_candidates(&ordered, f),
            };
            for (score, split) in candidates {
                if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                    best = Some((score, f, split));
                }
            }
        }
        match best {
            Some((score, feature, split)) if score <= parent + MIN_GAIN => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| match split {
                    Split::Le(t) => self.x[i][feature] <= t,
                    Split::Eq(c) => self.x[i][feature] == c,
                });
                Node::Internal {
                    feature,
                    split,
                    left: Box::new(self.build(&l, depth + 1)),
                    right: Box::new(self.build(&r, depth + 1)),
                }
            }
            _ => self.leaf(idx),
        }
    }

    fn numeric_candidates(&self, ordered: &[usize], f: usize) -> Vec<(f64, Split)> {
        let n = ordered.len();
        let mut left = self.empty_stats();
        let mut right = self.stats_of(ordered);
        let mut out = Vec::new();
        for k in 0..n - 1 {
            let i = ordered[k];
            left.add(self.y[i]);
            right.remove(self.y[i]);
            let (a, b) = (self.x[i][f], self.x[ordered[k + 1]][f]);
            if a == b || k + 1 < self.min_leaf || n - k - 1 < self.min_leaf {
                continue;
            }
            let score = self.impurity(&left) + self.impurity(&right);
            out.push((score, Split::Le(a + (b - a) / 2.0)));
        }
        out
    }

    fn categorical_candidates(&self, ordered: &[usize], f: usize) -> Vec<(f64, Split)> {
        let total = self.stats_of(ordered);
        let mut out = Vec::new();
        let mut start = 0;
        while start < ordered.len() {
            let v = self.x[ordered[start]][f];
            let end = start + ordered[start..].iter().take_while(|&&i| self.x[i][f] == v).count();
            let inside = &ordered[start..end];
            let n_in = inside.len();
            if n_in >= self.min_leaf && ordered.len() - n_in >= self.min_leaf {
                let eq = self.stats_of(inside);
                let mut rest = total.clone();
                for &i in inside {
                    rest.remove(self.y[i]);
                }
                out.push((self.impurity(&eq) + self.impurity(&rest), Split::Eq(v)));
            }
            start = end;
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Stats {
    Counts(Vec<f64>, f64),
    Moments { n: f64, sum: f64, sq: f64 },
}

impl Stats {
    fn add(&mut self, y: f64) {
        match self {
            Stats::Counts(c, n) => {
                c[y as usize] += 1.0;
                *n += 1.0;
            }
            Stats::Moments { n, sum, sq } => {
                *n += 1.0;
                *sum += y;
                *sq += y * y;
            }
        }
    }

    fn remove(&mut self, y: f64) {
        match self {
            Stats::Counts(c, n) => {
                c[y as usize] -= 1.0;
                *n -= 1.0;
            }
            Stats::Moments { n, sum, sq } => {
                *n -= 1.0;
                *sum -= y;
                *sq -= y * y;
            }
        }
    }
}

impl FittedPredictor for Cart {
    fn predict(&self, features: &Table) -> Result<Vec<Cell>> {
        let x = self.encoder.encode(features)?;
        let schema = &self.encoder.schema;
        Ok(x
            .iter()
            .map(|r| {
                let leaf = self.leaf(r);
                if self.classes.is_empty() {
                    value_cell(leaf[0])
                } else {
                    label_cell(schema, &self.classes[argmax(leaf)])
                }
            })
            .collect())
    }

    fn predict_scores(&self, features: &Table) -> Result<Option<Vec<Vec<f64>>>> {
        if self.classes.is_empty() {
            return Ok(None);
        }
        let x = self.encoder.encode(features)?;
        Ok(Some(x.iter().map(|r| self.leaf(r).to_vec()).collect()))
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }
}
