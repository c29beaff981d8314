//! Tabular data model: typed schema, cells that keep their original text,
//! CSV loading and writing, and the dataset perturbations used by the
//! evaluation scenarios (train/test split, missingness masks, minority
//! downsampling).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Column {
            name: name.into(),
            kind,
        }
    }
}

/// The label column of a schema. `index` points into `Schema::columns`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub index: usize,
    pub task: Task,
    pub class_count: Option<usize>,
}

/// Ordered columns plus an optional label column.
///
/// The label is stored in place among the columns so that CSV files keep
/// their original column order; [`Schema::feature_indices`] lists the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    columns: Vec<Column>,
    target: Option<Target>,
}

impl Schema {
    pub fn new(columns: Vec<Column>, target: Option<Target>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Schema("schema has no columns".into()));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.is_empty() {
                return Err(Error::Schema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", c.name)));
            }
        }
        if let Some(t) = &target {
            if t.index >= columns.len() {
                return Err(Error::Schema(format!("label index {} out of range", t.index)));
            }
            if t.task == Task::Classification && t.class_count.is_some_and(|n| n < 2) {
                return Err(Error::Schema(format!(
                    "classification label `{}` needs at least 2 classes",
                    columns[t.index].name
                )));
            }
            if t.task == Task::Regression && columns[t.index].kind != ColumnKind::Numerical {
                return Err(Error::Schema(format!(
                    "regression label `{}` must be numerical",
                    columns[t.index].name
                )));
            }
        }
        Ok(Schema { columns, target })
    }

    /// Convenience constructor for an unlabeled schema.
    pub fn features(columns: Vec<Column>) -> Result<Self> {
        Schema::new(columns, None)
    }

    /// Builds a labeled schema, naming the label column.
    pub fn labeled(
        columns: Vec<Column>,
        label: &str,
        task: Task,
        class_count: Option<usize>,
    ) -> Result<Self> {
        let index = columns
            .iter()
            .position(|c| c.name == label)
            .ok_or_else(|| Error::Schema(format!("label column `{label}` not found")))?;
        Schema::new(
            columns,
            Some(Target {
                index,
                task,
                class_count,
            }),
        )
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, index: usize) -> &Column {
        &self.columns[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn target(&self) -> Option<&Target> {
        self.target.as_ref()
    }

    pub fn label_index(&self) -> Option<usize> {
        self.target.as_ref().map(|t| t.index)
    }

    pub fn label_name(&self) -> Option<&str> {
        self.label_index().map(|i| self.columns[i].name.as_str())
    }

    pub fn task(&self) -> Option<Task> {
        self.target.as_ref().map(|t| t.task)
    }

    pub fn is_label(&self, index: usize) -> bool {
        self.label_index() == Some(index)
    }

    /// Indices of all non-label columns, in schema order.
    pub fn feature_indices(&self) -> Vec<usize> {
        (0..self.columns.len()).filter(|&i| !self.is_label(i)).collect()
    }

    pub fn feature_count(&self) -> usize {
        self.columns.len() - usize::from(self.target.is_some())
    }

    pub fn with_class_count(mut self, class_count: Option<usize>) -> Self {
        if let Some(t) = &mut self.target {
            t.class_count = class_count;
        }
        self
    }

    /// Copy of this schema with column names replaced.
    pub fn renamed(&self, names: &[String]) -> Result<Schema> {
        if names.len() != self.columns.len() {
            return Err(Error::Schema("rename list length mismatch".into()));
        }
        let columns = self
            .columns
            .iter()
            .zip(names)
            .map(|(c, n)| Column::new(n.clone(), c.kind))
            .collect();
        Schema::new(columns, self.target.clone())
    }

    /// True when both schemas agree on names, kinds, and label position.
    pub fn compatible_with(&self, other: &Schema) -> bool {
        self.columns == other.columns && self.label_index() == other.label_index()
    }

    /// Names the first column where `other` disagrees with `self`.
    pub fn check_compatible(&self, other: &Schema) -> Result<()> {
        if self.columns.len() != other.columns.len() {
            return Err(Error::Schema(format!(
                "schema mismatch: {} columns vs {}",
                self.columns.len(),
                other.columns.len()
            )));
        }
        for (a, b) in self.columns.iter().zip(&other.columns) {
            if a != b {
                return Err(Error::Schema(format!(
                    "schema mismatch at column `{}` (expected `{}` {:?})",
                    b.name, a.name, a.kind
                )));
            }
        }
        if self.label_index() != other.label_index() {
            return Err(Error::Schema("schema mismatch: label column differs".into()));
        }
        Ok(())
    }
}

/// A decimal number that remembers how it was written.
#[derive(Debug, Clone, PartialEq)]
pub struct Number {
    text: String,
    value: f64,
}

impl Number {
    /// Parses `text` if it is a plain decimal literal: optional sign, digits
    /// with an optional fractional part, optional exponent. `inf`, `nan`,
    /// and surrounding whitespace are rejected.
    pub fn parse(text: &str) -> Option<Number> {
        if !is_decimal(text) {
            return None;
        }
        let value: f64 = text.parse().ok()?;
        value.is_finite().then(|| Number {
            text: text.to_string(),
            value,
        })
    }

    /// Renders a computed value (e.g. a regression prediction).
    pub fn from_f64(value: f64) -> Number {
        let text = format!("{value}");
        Number { text, value }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

fn is_decimal(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let int_digits = i - int_start;
    let mut frac_digits = 0;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let f = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        frac_digits = i - f;
    }
    if int_digits + frac_digits == 0 {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let e = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == e {
            return false;
        }
    }
    i == b.len()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Number(Number),
    Category(String),
    Missing,
}

impl Cell {
    pub fn number(text: &str) -> Option<Cell> {
        Number::parse(text).map(Cell::Number)
    }

    pub fn category(text: impl Into<String>) -> Cell {
        Cell::Category(text.into())
    }

    /// Interprets `text` under `kind`; `None` when a numerical column gets a
    /// non-decimal. The empty string is always `Missing`.
    pub fn parse_as(text: &str, kind: ColumnKind) -> Option<Cell> {
        if text.is_empty() {
            return Some(Cell::Missing);
        }
        match kind {
            ColumnKind::Numerical => Cell::number(text),
            ColumnKind::Categorical => Some(Cell::Category(text.to_string())),
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    /// Original text form; empty for `Missing`.
    pub fn text(&self) -> &str {
        match self {
            Cell::Number(n) => n.text(),
            Cell::Category(s) => s,
            Cell::Missing => "",
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Number(n) => Some(n.value()),
            _ => None,
        }
    }

    pub fn kind_matches(&self, kind: ColumnKind) -> bool {
        matches!(
            (self, kind),
            (Cell::Missing, _)
                | (Cell::Number(_), ColumnKind::Numerical)
                | (Cell::Category(_), ColumnKind::Categorical)
        )
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

/// One record, aligned with `Schema::columns` (label cell included in place).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Row(pub Vec<Cell>);

impl Row {
    pub fn new(cells: Vec<Cell>) -> Self {
        Row(cells)
    }

    pub fn missing(width: usize) -> Self {
        Row(vec![Cell::Missing; width])
    }
}

impl Deref for Row {
    type Target = Vec<Cell>;
    fn deref(&self) -> &Vec<Cell> {
        &self.0
    }
}

impl DerefMut for Row {
    fn deref_mut(&mut self) -> &mut Vec<Cell> {
        &mut self.0
    }
}

impl From<Vec<Cell>> for Row {
    fn from(cells: Vec<Cell>) -> Self {
        Row(cells)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: Schema,
    pub rows: Vec<Row>,
    pub source_id: String,
}

impl Table {
    /// Checks row widths and cell kinds against the schema.
    pub fn new(schema: Schema, rows: Vec<Row>, source_id: impl Into<String>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "row {i} has {} cells, schema has {} columns",
                    row.len(),
                    schema.len()
                )));
            }
            for (cell, col) in row.iter().zip(schema.columns()) {
                if !cell.kind_matches(col.kind) {
                    return Err(Error::Schema(format!(
                        "row {i}: cell `{cell}` does not fit {:?} column `{}`",
                        col.kind, col.name
                    )));
                }
            }
        }
        Ok(Table {
            schema,
            rows,
            source_id: source_id.into(),
        })
    }

    pub fn empty_like(&self) -> Table {
        Table {
            schema: self.schema.clone(),
            rows: Vec::new(),
            source_id: self.source_id.clone(),
        }
    }

    pub fn with_rows(&self, rows: Vec<Row>) -> Table {
        Table {
            schema: self.schema.clone(),
            rows,
            source_id: self.source_id.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn label(&self, row: usize) -> Option<&Cell> {
        self.schema.label_index().map(|i| &self.rows[row][i])
    }

    /// Every label cell is present. Required before fitting a predictor.
    pub fn require_labels(&self) -> Result<()> {
        let Some(li) = self.schema.label_index() else {
            return Err(Error::Schema(format!("table `{}` has no label column", self.source_id)));
        };
        if let Some(r) = self.rows.iter().position(|r| r[li].is_missing()) {
            return Err(Error::Schema(format!(
                "table `{}` row {r}: label is missing",
                self.source_id
            )));
        }
        Ok(())
    }

    /// Sorted distinct label texts (classification).
    pub fn class_values(&self) -> Vec<String> {
        let Some(li) = self.schema.label_index() else {
            return Vec::new();
        };
        let set: BTreeSet<&str> = self
            .rows
            .iter()
            .filter(|r| !r[li].is_missing())
            .map(|r| r[li].text())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Count of rows per label text.
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        if let Some(li) = self.schema.label_index() {
            for r in &self.rows {
                if !r[li].is_missing() {
                    *counts.entry(r[li].text().to_string()).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    pub fn missing_feature_cells(&self) -> usize {
        let feats = self.schema.feature_indices();
        self.rows
            .iter()
            .map(|r| feats.iter().filter(|&&j| r[j].is_missing()).count())
            .sum()
    }

    /// Appends rows of `other`, which must share this table's schema.
    pub fn concat(&self, other: &Table) -> Result<Table> {
        self.schema.check_compatible(&other.schema)?;
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        Ok(self.with_rows(rows))
    }

    /// Per-column set of categorical values present in this table.
    pub fn categorical_values(&self) -> Vec<BTreeSet<String>> {
        let mut sets = vec![BTreeSet::new(); self.schema.len()];
        for row in &self.rows {
            for (j, cell) in row.iter().enumerate() {
                if let Cell::Category(s) = cell {
                    sets[j].insert(s.clone());
                }
            }
        }
        sets
    }
}

/// Optional typing information applied while loading a CSV.
#[derive(Debug, Clone, Default)]
pub struct SchemaHint {
    pub label: Option<(String, Task)>,
    /// Forces the kind of named columns instead of inferring it.
    pub kinds: BTreeMap<String, ColumnKind>,
}

impl SchemaHint {
    pub fn labeled(name: impl Into<String>, task: Task) -> Self {
        SchemaHint {
            label: Some((name.into(), task)),
            kinds: BTreeMap::new(),
        }
    }

    /// Hint that reproduces every column kind and the label of `schema`.
    pub fn from_schema(schema: &Schema) -> Self {
        SchemaHint {
            label: schema
                .target()
                .map(|t| (schema.column(t.index).name.clone(), t.task)),
            kinds: schema
                .columns()
                .iter()
                .map(|c| (c.name.clone(), c.kind))
                .collect(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, hint: &SchemaHint) -> Result<Table> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, &source_id, hint)
}

/// Reads a header-first, comma-separated table. A column is numerical iff
/// every non-empty cell is a decimal literal (unless the hint says otherwise).
pub fn read_csv<R: Read>(reader: R, source_id: &str, hint: &SchemaHint) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut seen = HashSet::new();
    for name in &header {
        if name.is_empty() {
            return Err(Error::Load {
                line: 1,
                message: "empty column name in header".into(),
            });
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Load {
                line: 1,
                message: format!("duplicate column name `{name}`"),
            });
        }
    }

    let mut raw: Vec<(u64, Vec<String>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        raw.push((line, rec.iter().map(str::to_string).collect()));
    }
    if raw.is_empty() {
        return Err(Error::Load {
            line: 2,
            message: "no data rows".into(),
        });
    }

    let mut columns = Vec::with_capacity(header.len());
    for (j, name) in header.iter().enumerate() {
        let kind = match hint.kinds.get(name) {
            Some(k) => *k,
            None => {
                let numeric = raw
                    .iter()
                    .map(|(_, r)| r[j].as_str())
                    .filter(|s| !s.is_empty())
                    .all(|s| Number::parse(s).is_some());
                if numeric {
                    ColumnKind::Numerical
                } else {
                    ColumnKind::Categorical
                }
            }
        };
        columns.push(Column::new(name.clone(), kind));
    }

    let mut rows = Vec::with_capacity(raw.len());
    for (line, fields) in &raw {
        let mut cells = Vec::with_capacity(fields.len());
        for (j, text) in fields.iter().enumerate() {
            let cell = Cell::parse_as(text, columns[j].kind).ok_or_else(|| Error::Load {
                line: *line,
                message: format!("`{text}` is not a number (column `{}`)", columns[j].name),
            })?;
            cells.push(cell);
        }
        rows.push(Row(cells));
    }

    let target = match &hint.label {
        None => None,
        Some((name, task)) => {
            let index = header.iter().position(|h| h == name).ok_or_else(|| Error::Load {
                line: 1,
                message: format!("label column `{name}` not in header"),
            })?;
            if let Some(((line, _), _)) = raw
                .iter()
                .zip(&rows)
                .find(|(_, r)| r[index].is_missing())
            {
                return Err(Error::Load {
                    line: *line,
                    message: format!("missing label in column `{name}`"),
                });
            }
            let class_count = (*task == Task::Classification).then(|| {
                rows.iter()
                    .map(|r| r[index].text())
                    .collect::<BTreeSet<_>>()
                    .len()
            });
            Some(Target {
                index,
                task: *task,
                class_count,
            })
        }
    };
    let schema = Schema::new(columns, target).map_err(|e| Error::Load {
        line: 1,
        message: e.to_string(),
    })?;
    Table::new(schema, rows, source_id)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("row has {len} fields, expected {expected_len}"),
        _ => e.to_string(),
    };
    Error::Load { line, message }
}

pub fn write_csv<W: Write>(table: &Table, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(writer);
    let io = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
    wtr.write_record(table.schema.columns().iter().map(|c| c.name.as_str()))
        .map_err(io)?;
    for row in &table.rows {
        wtr.write_record(row.iter().map(Cell::text)).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn to_csv_string(table: &Table) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(table, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Codec(e.to_string()))
}

/// Seeded train/test partition. `train_fraction` of the rows (rounded) go to
/// the first part; both parts follow the same shuffled order.
pub fn split(table: &Table, train_fraction: f64, seed: u64) -> Result<(Table, Table)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let n = table.len();
    if n < 2 {
        return Err(Error::InvalidArgument("split needs at least 2 rows".into()));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} rows at {train_fraction} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, streams::SPLIT));
    let pick = |idx: &[usize]| idx.iter().map(|&i| table.rows[i].clone()).collect();
    Ok((
        table.with_rows(pick(&order[..n_train])),
        table.with_rows(pick(&order[n_train..])),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mechanism {
    Mcar,
    Mar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessSpec {
    pub mechanism: Mechanism,
    pub miss_ratio: f64,
    #[serde(default)]
    pub anchor_column: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl MissingnessSpec {
    pub fn mcar(miss_ratio: f64, seed: u64) -> Self {
        MissingnessSpec {
            mechanism: Mechanism::Mcar,
            miss_ratio,
            anchor_column: None,
            seed,
        }
    }

    pub fn mar(miss_ratio: f64, anchor: impl Into<String>, seed: u64) -> Self {
        MissingnessSpec {
            mechanism: Mechanism::Mar,
            miss_ratio,
            anchor_column: Some(anchor.into()),
            seed,
        }
    }
}

/// Feature cells eligible for masking under `spec` (the MAR anchor is never
/// masked, labels never are).
pub fn maskable_columns(schema: &Schema, spec: &MissingnessSpec) -> Vec<usize> {
    let anchor = spec.anchor_column.as_deref().and_then(|a| schema.index_of(a));
    schema
        .feature_indices()
        .into_iter()
        .filter(|&j| spec.mechanism == Mechanism::Mcar || Some(j) != anchor)
        .collect()
}

/// Masks feature cells. MCAR masks every feature cell independently with
/// probability `miss_ratio`. MAR ranks rows by the anchor column and masks
/// each non-anchor feature cell of a row with probability
/// `min(1, 2 * miss_ratio * percentile)`, percentile = (rank + 0.5) / n.
pub fn apply_missingness(table: &Table, spec: &MissingnessSpec) -> Result<Table> {
    if !(spec.miss_ratio > 0.0 && spec.miss_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "miss ratio {} not in (0, 1)",
            spec.miss_ratio
        )));
    }
    let schema = &table.schema;
    let features = schema.feature_indices();
    if table
        .rows
        .iter()
        .any(|r| features.iter().any(|&j| r[j].is_missing()))
    {
        return Err(Error::InvalidArgument(
            "missingness must be applied to a fully observed table".into(),
        ));
    }
    let n = table.len();
    let row_prob: Vec<f64> = match spec.mechanism {
        Mechanism::Mcar => vec![spec.miss_ratio; n],
        Mechanism::Mar => {
            let name = spec.anchor_column.as_deref().ok_or_else(|| {
                Error::InvalidArgument("MAR requires an anchor column".into())
            })?;
            let a = schema
                .index_of(name)
                .ok_or_else(|| Error::InvalidArgument(format!("anchor `{name}` not in schema")))?;
            if schema.is_label(a) || schema.column(a).kind != ColumnKind::Numerical {
                return Err(Error::InvalidArgument(format!(
                    "MAR anchor `{name}` must be a numerical feature column"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| {
                let vx = table.rows[x][a].as_f64().unwrap_or(f64::NAN);
                let vy = table.rows[y][a].as_f64().unwrap_or(f64::NAN);
                vx.total_cmp(&vy).then(x.cmp(&y))
            });
            let mut prob = vec![0.0; n];
            for (rank, &i) in order.iter().enumerate() {
                let pct = (rank as f64 + 0.5) / n as f64;
                prob[i] = (2.0 * spec.miss_ratio * pct).min(1.0);
            }
            prob
        }
    };
    let cols = maskable_columns(schema, spec);
    let mut rng = rng::stream(spec.seed, streams::MISSINGNESS);
    let rows = table
        .rows
        .iter()
        .zip(&row_prob)
        .map(|(row, &p)| {
            let mut row = row.clone();
            for &j in &cols {
                if rng.random::<f64>() < p {
                    row[j] = Cell::Missing;
                }
            }
            row
        })
        .collect();
    Ok(table.with_rows(rows))
}

/// Subsamples the minority class of a binary table until
/// `majority / minority == ratio` (integer division). Majority rows and the
/// relative order of kept rows are unchanged. On equal counts the class that
/// sorts last is treated as the minority.
pub fn downsample_minority(table: &Table, ratio: usize, seed: u64) -> Result<Table> {
    if ratio == 0 {
        return Err(Error::InvalidArgument("imbalance ratio must be positive".into()));
    }
    let (majority, minority) = binary_classes(table)?;
    let counts = table.class_counts();
    let n_major = counts[&majority];
    let n_minor = counts[&minority];
    let target = n_major / ratio;
    if target == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} leaves no minority rows ({n_major} majority)"
        )));
    }
    let li = table.schema.label_index().expect("binary_classes checked label");
    let minority_rows: Vec<usize> = (0..table.len())
        .filter(|&i| table.rows[i][li].text() == minority)
        .collect();
    let keep: HashSet<usize> = if target >= n_minor {
        minority_rows.into_iter().collect()
    } else {
        let mut idx = minority_rows;
        idx.shuffle(&mut rng::stream(seed, streams::DOWNSAMPLE));
        idx.into_iter().take(target).collect()
    };
    let rows = table
        .rows
        .iter()
        .enumerate()
        .filter(|(i, r)| r[li].text() == majority || keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    Ok(table.with_rows(rows))
}

/// `(majority, minority)` label texts of a binary classification table.
pub fn binary_classes(table: &Table) -> Result<(String, String)> {
    if table.schema.task() != Some(Task::Classification) {
        return Err(Error::InvalidArgument("table is not a classification table".into()));
    }
    let counts = table.class_counts();
    if counts.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected a binary label, found {} classes",
            counts.len()
        )));
    }
    let mut it = counts.into_iter();
    let (a, na) = it.next().expect("two classes");
    let (b, nb) = it.next().expect("two classes");
    // `a` sorts before `b`; on a tie `b` is the minority
    Ok(if na >= nb { (a, b) } else { (b, a) })
}
