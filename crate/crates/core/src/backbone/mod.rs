//! Downstream predictors: pseudo-labelers for synthetic rows and the models
//! every scenario evaluates.

mod cart;
mod knn;
mod plugin;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cart::Cart;
pub use knn::Knn;
pub use plugin::PluginBackbone;

use crate::codec::{TextCodec, IS};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::sampler::{render_prompt, Generator, Prompt, SamplingConfig};
use crate::table::{Cell, ColumnKind, Number, Schema, Table, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackboneConfig {
    Cart { max_depth: usize, min_leaf: usize },
    Knn { k: usize },
    Plugin { command: String },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Cart {
            max_depth: 6,
            min_leaf: 5,
        }
    }
}

impl BackboneConfig {
    pub fn name(&self) -> String {
        match self {
            BackboneConfig::Cart { .. } => "cart".into(),
            BackboneConfig::Knn { .. } => "knn".into(),
            BackboneConfig::Plugin { command } => format!("plugin:{command}"),
        }
    }

    /// Fits on a labeled table.
    pub fn fit(&self, train: &Table) -> Result<Box<dyn FittedPredictor>> {
        let data = TrainingData::new(train)?;
        Ok(match self {
            BackboneConfig::Cart { max_depth, min_leaf } => {
                Box::new(Cart::fit(data, *max_depth, *min_leaf)?)
            }
            BackboneConfig::Knn { k } => Box::new(Knn::fit(data, *k)?),
            BackboneConfig::Plugin { command } => {
                Box::new(PluginBackbone::fit(command, train)?)
            }
        })
    }
}

/// A fitted, immutable predictor.
pub trait FittedPredictor: Send + Sync {
    /// One label per row, typed like the label column.
    fn predict(&self, features: &Table) -> Result<Vec<Cell>>;

    /// Per-class probabilities in [`FittedPredictor::classes`] order, for
    /// classification; `None` for regression.
    fn predict_scores(&self, features: &Table) -> Result<Option<Vec<Vec<f64>>>>;

    /// Class values in sorted order; empty for regression.
    fn classes(&self) -> &[String];
}

/// Training target.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Target {
    Classes { ids: Vec<usize>, names: Vec<String> },
    Values(Vec<f64>),
}

/// Per-column stand-in for missing feature cells, computed from training data.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Surrogate {
    Number(f64),
    /// Sorted distinct categories and the index of the mode.
    Category { values: Vec<String>, mode: usize },
}

/// Train features as a dense matrix: numbers as-is, categories as their
/// index among the sorted training categories (`-1` when unseen).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Encoder {
    pub(crate) features: Vec<usize>,
    pub(crate) kinds: Vec<ColumnKind>,
    pub(crate) surrogates: Vec<Surrogate>,
    pub(crate) schema: Schema,
}

impl Encoder {
    fn new(train: &Table) -> Result<Encoder> {
        let schema = &train.schema;
        let features = schema.feature_indices();
        let mut kinds = Vec::new();
        let mut surrogates = Vec::new();
        for &j in &features {
            let kind = schema.column(j).kind;
            kinds.push(kind);
            let observed = train.rows.iter().map(|r| &r[j]).filter(|c| !c.is_missing());
            surrogates.push(match kind {
                ColumnKind::Numerical => {
                    let mut v: Vec<f64> = observed.filter_map(Cell::as_f64).collect();
                    v.sort_by(f64::total_cmp);
                    Surrogate::Number(if v.is_empty() { 0.0 } else { v[(v.len() - 1) / 2] })
                }
                ColumnKind::Categorical => {
                    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                    for c in observed {
                        *counts.entry(c.text().to_string()).or_insert(0) += 1;
                    }
                    let best = counts.values().copied().max().unwrap_or(0);
                    let mode = counts.values().position(|&n| n == best).unwrap_or(0);
                    Surrogate::Category {
                        values: counts.into_keys().collect(),
                        mode,
                    }
                }
            });
        }
        Ok(Encoder {
            features,
            kinds,
            surrogates,
            schema: schema.clone(),
        })
    }

    pub(crate) fn width(&self) -> usize {
        self.features.len()
    }

    fn encode_cell(&self, f: usize, cell: &Cell) -> f64 {
        match (&self.surrogates[f], cell) {
            (Surrogate::Number(m), Cell::Missing) => *m,
            (Surrogate::Number(m), c) => c.as_f64().unwrap_or(*m),
            (Surrogate::Category { mode, .. }, Cell::Missing) => *mode as f64,
            (Surrogate::Category { values, .. }, c) => values
                .binary_search_by(|v| v.as_str().cmp(c.text()))
                .map_or(-1.0, |i| i as f64),
        }
    }

    /// Rows of `table` as encoded feature vectors.
    pub(crate) fn encode(&self, table: &Table) -> Result<Vec<Vec<f64>>> {
        check_features(&self.schema, &table.schema)?;
        Ok(table
            .rows
            .iter()
            .map(|r| {
                self.features
                    .iter()
                    .enumerate()
                    .map(|(f, &j)| self.encode_cell(f, &r[j]))
                    .collect()
            })
            .collect())
    }
}

/// The feature columns of `other` must match those of `train` by name, kind
/// and position.
fn check_features(train: &Schema, other: &Schema) -> Result<()> {
    if train.len() != other.len() {
        return Err(Error::Schema(format!(
            "expected {} columns, found {}",
            train.len(),
            other.len()
        )));
    }
    for (a, b) in train.columns().iter().zip(other.columns()) {
        if a.name != b.name || a.kind != b.kind {
            return Err(Error::Schema(format!(
                "column `{}` does not match training column `{}`",
                b.name, a.name
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TrainingData {
    pub(crate) encoder: Encoder,
    pub(crate) x: Vec<Vec<f64>>,
    pub(crate) target: Target,
}

impl TrainingData {
    fn new(train: &Table) -> Result<TrainingData> {
        let label = train
            .schema
            .label_index()
            .ok_or_else(|| Error::InvalidArgument("backbone needs a labeled table".into()))?;
        train.require_labels()?;
        if train.len() < 2 {
            return Err(Error::InvalidArgument("backbone needs at least 2 rows".into()));
        }
        let target = match train.schema.task() {
            Some(Task::Classification) => {
                let names = train.class_values();
                if names.len() < 2 {
                    return Err(Error::InvalidArgument(
                        "classification training set has a single class".into(),
                    ));
                }
                let ids = train
                    .rows
                    .iter()
                    .map(|r| names.binary_search_by(|n| n.as_str().cmp(r[label].text())).unwrap())
                    .collect();
                Target::Classes { ids, names }
            }
            _ => Target::Values(
                train
                    .rows
                    .iter()
                    .map(|r| {
                        r[label].as_f64().ok_or_else(|| {
                            Error::Schema("regression label must be numerical".into())
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let encoder = Encoder::new(train)?;
        let x = encoder.encode(train)?;
        Ok(TrainingData { encoder, x, target })
    }
}

/// A predicted label as a cell of the label column.
pub(crate) fn label_cell(schema: &Schema, text: &str) -> Cell {
    let kind = schema
        .label_index()
        .map_or(ColumnKind::Categorical, |l| schema.column(l).kind);
    Cell::parse_as(text, kind).unwrap_or_else(|| Cell::category(text))
}

pub(crate) fn value_cell(v: f64) -> Cell {
    Cell::Number(Number::from_f64(v))
}

/// Index of the largest score; the first one on ties.
pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Attaches `predictor`'s labels to synthetic feature rows.
pub fn label_synthetic(predictor: &dyn FittedPredictor, synth: &Table) -> Result<Table> {
    let label = synth
        .schema
        .label_index()
        .ok_or_else(|| Error::Schema("synthetic table has no label column".into()))?;
    if synth.is_empty() {
        return Ok(synth.clone());
    }
    let labels = predictor.predict(synth)?;
    let mut rows = synth.rows.clone();
    for (r, y) in rows.iter_mut().zip(labels) {
        r[label] = y;
    }
    Ok(synth.with_rows(rows))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelAblationReport {
    pub attempted: usize,
    /// Rows that received the majority label after all attempts failed.
    pub fallback_rows: Vec<usize>,
}

/// Labels synthetic rows with the language model itself: all features are
/// given as a multi-pair prompt followed by `"<label> is "`, and the label
/// clause of the completion is read back. Classification labels must be a
/// known class; after `max_attempts_per_row` failures `fallback` is used.
pub fn lm_label_ablation(
    generator: &dyn Generator,
    codec: &TextCodec,
    synth: &Table,
    classes: &[String],
    fallback: &Cell,
    cfg: &SamplingConfig,
) -> Result<(Table, LabelAblationReport)> {
    cfg.validate()?;
    let schema = codec.schema();
    let label = schema
        .label_index()
        .ok_or_else(|| Error::Schema("table has no label column".into()))?;
    if !codec.serialized_columns().contains(&label) {
        return Err(Error::Config(
            "label ablation needs the label serialized during fine-tuning".into(),
        ));
    }
    check_features(schema, &synth.schema)?;
    let base = rng::derive(cfg.seed, streams::LABEL);
    let classification = schema.task() == Some(Task::Classification);
    let mut report = LabelAblationReport::default();
    let mut rows = synth.rows.clone();
    for (i, row) in rows.iter_mut().enumerate() {
        let pairs: Vec<(usize, Cell)> = codec
            .serialized_columns()
            .iter()
            .filter(|&&j| j != label && !row[j].is_missing())
            .map(|&j| (j, row[j].clone()))
            .collect();
        let mut found = None;
        for a in 0..cfg.max_attempts_per_row {
            report.attempted += 1;
            let seed = rng::derive(base, (i * cfg.max_attempts_per_row + a) as u64);
            let mut prompt = if pairs.is_empty() {
                String::new()
            } else {
                render_prompt(&Prompt::multi_pair(pairs.clone()), codec, rng::derive(seed, 0))
            };
            prompt.push_str(codec.rendered_name(label));
            prompt.push_str(IS);
            let mut r = rng::seeded(rng::derive(seed, 1));
            let text = generator.complete(&prompt, cfg, codec.separator(), &mut r)?;
            let parsed = codec.parse_sentence(&text);
            if let Some(cell) = parsed.get(label) {
                if !classification || classes.iter().any(|c| c == cell.text()) {
                    found = Some(cell.clone());
                    break;
                }
            }
        }
        row[label] = match found {
            Some(c) => c,
            None => {
                report.fallback_rows.push(i);
                fallback.clone()
            }
        };
    }
    Ok((synth.with_rows(rows), report))
}

/// How two-phase training was carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationSemantics {
    OriginalOnly,
    /// Synthetic rows followed by `upweight` copies of the original rows.
    UpweightedConcatenation,
    Concatenation,
}

/// Synthetic-then-original training. CART and plugins cannot continue
/// training, so they fit once on the synthetic rows followed by `upweight`
/// copies of the original rows; kNN, being memory-based, simply stores both.
pub fn train_with_augmentation(
    cfg: &BackboneConfig,
    synth: &Table,
    original: &Table,
    upweight: usize,
) -> Result<(Box<dyn FittedPredictor>, AugmentationSemantics)> {
    if original.is_empty() {
        return Err(Error::InvalidArgument("original table is empty".into()));
    }
    if upweight == 0 {
        return Err(Error::InvalidArgument("upweight factor must be >= 1".into()));
    }
    original.schema.check_compatible(&synth.schema)?;
    if synth.is_empty() {
        return Ok((cfg.fit(original)?, AugmentationSemantics::OriginalOnly));
    }
    let (reps, semantics) = match cfg {
        BackboneConfig::Knn { .. } => (1, AugmentationSemantics::Concatenation),
        _ => (upweight, AugmentationSemantics::UpweightedConcatenation),
    };
    let mut combined = synth.clone();
    for _ in 0..reps {
        combined = combined.concat(original)?;
    }
    Ok((cfg.fit(&combined)?, semantics))
}
