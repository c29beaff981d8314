//! Row ⇄ sentence conversion.
//!
//! A row becomes a comma-separated list of `<feature> is <value>` clauses in a
//! permuted feature order. Numbers may be spelled one character at a time
//! (`18` → `1 8`, `-12.5` → `- 1 2 . 5`); categorical values are written
//! verbatim, double-quoted when they would otherwise be ambiguous (contain
//! the separator or a quote, have surrounding whitespace, or are empty).
//! Missing cells produce no clause.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::table::{Cell, ColumnKind, Number, Row, Schema};

pub const IS: &str = " is ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Spell numbers one character per token.
    pub use_character_numbers: bool,
    /// Use the schema's column names; otherwise `V1`, `V2`, ...
    pub use_real_feature_names: bool,
    pub clause_separator: String,
    /// Serialize the label as an ordinary clause.
    pub include_label: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            use_character_numbers: true,
            use_real_feature_names: true,
            clause_separator: ", ".to_string(),
            include_label: true,
        }
    }
}

/// A bijection on `0..m`: position `p` of an encoded sentence holds the
/// clause of serialized column `mapping[p]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
    seed: Option<u64>,
}

impl Permutation {
    pub fn identity(m: usize) -> Self {
        Permutation {
            mapping: (0..m).collect(),
            seed: None,
        }
    }

    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &k in &mapping {
            if k >= mapping.len() || std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidArgument(format!(
                    "{mapping:?} is not a permutation"
                )));
            }
        }
        Ok(Permutation {
            mapping,
            seed: None,
        })
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (p, &k) in self.mapping.iter().enumerate() {
            inv[k] = p;
        }
        Permutation {
            mapping: inv,
            seed: None,
        }
    }

    /// Reorders `items` so that output position `p` holds `items[mapping[p]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.mapping.iter().map(|&k| items[k].clone()).collect()
    }
}

/// Uniformly random permutation of `0..m` (Fisher–Yates on a seeded stream).
pub fn random_permutation(m: usize, seed: u64) -> Permutation {
    let mut mapping: Vec<usize> = (0..m).collect();
    mapping.shuffle(&mut rng::seeded(seed));
    Permutation {
        mapping,
        seed: Some(seed),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub clauses: Vec<(String, String)>,
    pub order: Permutation,
}

impl EncodedSentence {
    pub fn render(&self, separator: &str) -> String {
        let mut out = String::new();
        for (i, (name, value)) in self.clauses.iter().enumerate() {
            if i > 0 {
                out.push_str(separator);
            }
            out.push_str(name);
            out.push_str(IS);
            out.push_str(value);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Diagnostic {
    /// Clause without the `<feature> is <value>` shape.
    Malformed { clause: String },
    UnknownFeature { name: String },
    DuplicateFeature { name: String },
    TypeMismatch { name: String, value: String },
}

impl Diagnostic {
    pub fn kind(&self) -> &'static str {
        match self {
            Diagnostic::Malformed { .. } => "malformed",
            Diagnostic::UnknownFeature { .. } => "unknown-feature",
            Diagnostic::DuplicateFeature { .. } => "duplicate-feature",
            Diagnostic::TypeMismatch { .. } => "type-mismatch",
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::Malformed { clause } => write!(f, "malformed clause `{clause}`"),
            Diagnostic::UnknownFeature { name } => write!(f, "unknown feature `{name}`"),
            Diagnostic::DuplicateFeature { name } => write!(f, "duplicate feature `{name}`"),
            Diagnostic::TypeMismatch { name, value } => {
                write!(f, "`{value}` is not a valid value for `{name}`")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedClause {
    /// Schema column index.
    pub column: usize,
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParseResult {
    pub clauses: Vec<ParsedClause>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseResult {
    pub fn is_clean(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn first_error(&self) -> Option<&Diagnostic> {
        self.diagnostics.first()
    }

    pub fn get(&self, column: usize) -> Option<&Cell> {
        self.clauses
            .iter()
            .find(|c| c.column == column)
            .map(|c| &c.cell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodePolicy {
    Strict,
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    Parse(Diagnostic),
    MissingFeature { name: String },
    NoClauses,
    /// Categorical value outside the allowed set.
    Clamp { name: String, value: String },
    /// Prompt could not be honored (e.g. a prompted feature is absent).
    PromptConflict { name: String },
    Backend(String),
}

impl RejectReason {
    pub fn kind(&self) -> &'static str {
        match self {
            RejectReason::Parse(d) => d.kind(),
            RejectReason::MissingFeature { .. } => "missing-feature",
            RejectReason::NoClauses => "no-clauses",
            RejectReason::Clamp { .. } => "clamp",
            RejectReason::PromptConflict { .. } => "prompt-conflict",
            RejectReason::Backend(_) => "backend",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Parse(d) => d.fmt(f),
            RejectReason::MissingFeature { name } => write!(f, "feature `{name}` absent"),
            RejectReason::NoClauses => f.write_str("no clauses"),
            RejectReason::Clamp { name, value } => {
                write!(f, "`{value}` never observed in `{name}`")
            }
            RejectReason::PromptConflict { name } => write!(f, "prompted `{name}` conflict"),
            RejectReason::Backend(m) => write!(f, "backend: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub reasons: Vec<RejectReason>,
}

/// Encoder/parser bound to one schema and configuration.
#[derive(Debug, Clone)]
pub struct TextCodec {
    schema: Schema,
    cfg: CodecConfig,
    names: Vec<String>,
    serialized: Vec<usize>,
}

impl TextCodec {
    pub fn new(schema: Schema, cfg: CodecConfig) -> Result<Self> {
        let sep = cfg.clause_separator.as_str();
        if sep.is_empty() {
            return Err(Error::Codec("clause separator is empty".into()));
        }
        let names: Vec<String> = schema
            .columns()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if cfg.use_real_feature_names {
                    c.name.clone()
                } else {
                    format!("V{}", i + 1)
                }
            })
            .collect();
        for name in &names {
            if name.contains(sep)
                || name.contains('"')
                || name.contains(IS)
                || name.trim() != name
                || name.is_empty()
            {
                return Err(Error::Codec(format!(
                    "feature name `{name}` cannot be serialized with separator `{sep}`"
                )));
            }
        }
        let serialized = (0..schema.len())
            .filter(|&i| cfg.include_label || !schema.is_label(i))
            .collect();
        Ok(TextCodec {
            schema,
            cfg,
            names,
            serialized,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Schema indices of the columns that appear in sentences.
    pub fn serialized_columns(&self) -> &[usize] {
        &self.serialized
    }

    pub fn rendered_name(&self, column: usize) -> &str {
        &self.names[column]
    }

    pub fn separator(&self) -> &str {
        &self.cfg.clause_separator
    }

    /// Text a cell takes in a clause; `None` for `Missing`.
    pub fn render_value(&self, cell: &Cell) -> Option<String> {
        match cell {
            Cell::Missing => None,
            Cell::Number(n) if self.cfg.use_character_numbers => Some(spell_characters(n.text())),
            Cell::Number(n) => Some(n.text().to_string()),
            Cell::Category(s) => Some(if self.needs_quotes(s) {
                quote(s)
            } else {
                s.clone()
            }),
        }
    }

    fn needs_quotes(&self, s: &str) -> bool {
        s.is_empty()
            || s.contains('"')
            || s.contains(self.cfg.clause_separator.as_str())
            || s.trim() != s
    }

    pub fn render_clause(&self, column: usize, cell: &Cell) -> Option<String> {
        self.render_value(cell)
            .map(|v| format!("{}{IS}{v}", self.names[column]))
    }

    pub fn encode_clauses(&self, row: &Row, perm: &Permutation) -> EncodedSentence {
        assert_eq!(
            perm.len(),
            self.serialized.len(),
            "permutation size must equal the serialized column count"
        );
        let clauses = perm
            .apply(&self.serialized)
            .into_iter()
            .filter_map(|col| {
                self.render_value(&row[col])
                    .map(|v| (self.names[col].clone(), v))
            })
            .collect();
        EncodedSentence {
            clauses,
            order: perm.clone(),
        }
    }

    pub fn encode_row(&self, row: &Row, perm: &Permutation) -> String {
        self.encode_clauses(row, perm).render(self.separator())
    }

    /// Encodes with a fresh random feature order drawn from `seed`.
    pub fn encode_row_shuffled(&self, row: &Row, seed: u64) -> String {
        self.encode_row(row, &random_permutation(self.serialized.len(), seed))
    }

    /// Interprets one value text for `column`.
    pub fn parse_value(&self, column: usize, raw: &str) -> Option<Cell> {
        let raw = raw.trim();
        let text = if raw.starts_with('"') {
            unquote(raw)?
        } else {
            raw.to_string()
        };
        match self.schema.column(column).kind {
            ColumnKind::Numerical => {
                let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
                Number::parse(&compact).map(Cell::Number)
            }
            ColumnKind::Categorical => Some(Cell::Category(text)),
        }
    }

    /// Splits on the separator (outside quotes) and matches every clause
    /// against the known feature names. Never fails; problems become
    /// diagnostics and the offending clause is skipped.
    pub fn parse_sentence(&self, text: &str) -> ParseResult {
        let mut out = ParseResult::default();
        let mut seen = HashSet::new();
        let pieces = split_outside_quotes(text, self.separator());
        let last = pieces.len().saturating_sub(1);
        for (i, piece) in pieces.iter().enumerate() {
            let clause = piece.trim();
            if clause.is_empty() {
                if i != last {
                    out.diagnostics.push(Diagnostic::Malformed {
                        clause: String::new(),
                    });
                }
                continue;
            }
            let Some((column, value)) = self.match_clause(clause) else {
                out.diagnostics.push(match clause.find(IS) {
                    Some(at) => Diagnostic::UnknownFeature {
                        name: clause[..at].to_string(),
                    },
                    None => Diagnostic::Malformed {
                        clause: clause.to_string(),
                    },
                });
                continue;
            };
            let name = &self.names[column];
            if !seen.insert(column) {
                out.diagnostics.push(Diagnostic::DuplicateFeature { name: name.clone() });
                continue;
            }
            if value.trim().is_empty() {
                out.diagnostics.push(Diagnostic::Malformed {
                    clause: clause.to_string(),
                });
                continue;
            }
            match self.parse_value(column, value) {
                Some(cell) => out.clauses.push(ParsedClause { column, cell }),
                None => out.diagnostics.push(Diagnostic::TypeMismatch {
                    name: name.clone(),
                    value: value.trim().to_string(),
                }),
            }
        }
        out
    }

    /// Longest rendered name `n` with `clause` starting with `n is `.
    fn match_clause<'c>(&self, clause: &'c str) -> Option<(usize, &'c str)> {
        let mut best: Option<(usize, &str)> = None;
        for &col in &self.serialized {
            let name = &self.names[col];
            if let Some(rest) = clause.strip_prefix(name.as_str()) {
                let value = rest
                    .strip_prefix(IS)
                    .or_else(|| (rest == IS.trim_end()).then_some(""));
                if let Some(v) = value {
                    if best.is_none_or(|(b, _)| self.names[b].len() < name.len()) {
                        best = Some((col, v));
                    }
                }
            }
        }
        best
    }

    /// Turns parsed clauses into a row. `Strict` demands a clean parse with
    /// every feature column present; `Partial` fills absent cells with
    /// `Missing` and only needs one usable clause. The label cell is filled
    /// when a label clause was parsed and left `Missing` otherwise.
    pub fn decode_row(
        &self,
        parse: &ParseResult,
        policy: DecodePolicy,
    ) -> std::result::Result<Row, Rejection> {
        let mut row = Row::missing(self.schema.len());
        for c in &parse.clauses {
            row[c.column] = c.cell.clone();
        }
        match policy {
            DecodePolicy::Strict => {
                let mut reasons: Vec<RejectReason> = parse
                    .diagnostics
                    .iter()
                    .cloned()
                    .map(RejectReason::Parse)
                    .collect();
                for j in self.schema.feature_indices() {
                    if row[j].is_missing() {
                        reasons.push(RejectReason::MissingFeature {
                            name: self.names[j].clone(),
                        });
                    }
                }
                if reasons.is_empty() {
                    Ok(row)
                } else {
                    Err(Rejection { reasons })
                }
            }
            DecodePolicy::Partial => {
                if parse.clauses.is_empty() {
                    let mut reasons: Vec<RejectReason> = parse
                        .diagnostics
                        .iter()
                        .cloned()
                        .map(RejectReason::Parse)
                        .collect();
                    reasons.push(RejectReason::NoClauses);
                    Err(Rejection { reasons })
                } else {
                    Ok(row)
                }
            }
        }
    }

    pub fn decode_sentence(
        &self,
        text: &str,
        policy: DecodePolicy,
    ) -> std::result::Result<Row, Rejection> {
        self.decode_row(&self.parse_sentence(text), policy)
    }
}

/// `"-12.5"` → `"- 1 2 . 5"`.
pub fn spell_characters(text: &str) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    for (i, ch) in text.chars().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push(ch);
    }
    out
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn unquote(s: &str) -> Option<String> {
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '"' {
            if chars.next() != Some('"') {
                return None;
            }
        }
        out.push(c);
    }
    Some(out)
}

fn split_outside_quotes<'t>(text: &'t str, sep: &str) -> Vec<&'t str> {
    let mut pieces = Vec::new();
    let mut in_quotes = false;
    let mut start = 0;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        if bytes[i] == b'"' {
            in_quotes = !in_quotes;
            i += 1;
        } else if !in_quotes && bytes[i..].starts_with(sep.as_bytes()) {
            pieces.push(&text[start..i]);
            i += sep.len();
            start = i;
        } else {
            i += 1;
        }
    }
    pieces.push(&text[start..]);
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{Column, Task};

    fn adult() -> (TextCodec, Row) {
        let schema = Schema::labeled(
            vec![
                Column::new("Age", ColumnKind::Numerical),
                Column::new("Education", ColumnKind::Categorical),
                Column::new("Occupation", ColumnKind::Categorical),
                Column::new("Income", ColumnKind::Categorical),
            ],
            "Income",
            Task::Classification,
            Some(2),
        )
        .unwrap();
        let row = Row::new(vec![
            Cell::number("18").unwrap(),
            Cell::category("HS-grad"),
            Cell::category("Machine-op-inspct"),
            Cell::category("≤ 50K"),
        ]);
        (TextCodec::new(schema, CodecConfig::default()).unwrap(), row)
    }

    #[test]
    fn encodes_the_reference_sentence() {
        let (codec, row) = adult();
        assert_eq!(
            codec.encode_row(&row, &Permutation::identity(4)),
            "Age is 1 8, Education is HS-grad, Occupation is Machine-op-inspct, Income is ≤ 50K"
        );
        let plain = TextCodec::new(
            codec.schema().clone(),
            CodecConfig {
                use_character_numbers: false,
                ..CodecConfig::default()
            },
        )
        .unwrap();
        assert!(plain
            .encode_row(&row, &Permutation::identity(4))
            .starts_with("Age is 18, Education is HS-grad"));
    }

    #[test]
    fn single_column() {
        let schema = Schema::features(vec![Column::new("X", ColumnKind::Numerical)]).unwrap();
        let codec = TextCodec::new(schema, CodecConfig::default()).unwrap();
        let row = Row::new(vec![Cell::number("5").unwrap()]);
        assert_eq!(codec.encode_row_shuffled(&row, 99), "X is 5");
        assert_eq!(random_permutation(1, 3).mapping(), &[0]);
    }

    #[test]
    fn signs_and_points_are_characters() {
        assert_eq!(spell_characters("-12.5"), "- 1 2 . 5");
    }

    #[test]
    fn parse_examples() {
        let (codec, _) = adult();
        let p = codec.parse_sentence("Age is 1 8, Income is ≤ 50K");
        assert!(p.is_clean());
        assert_eq!(p.get(0).unwrap().text(), "18");
        assert_eq!(p.get(3).unwrap().text(), "≤ 50K");

        let p = codec.parse_sentence("Age is 1 8, Age is 2 0");
        assert_eq!(
            p.first_error(),
            Some(&Diagnostic::DuplicateFeature { name: "Age".into() })
        );
        let p = codec.parse_sentence("Agee is 18");
        assert_eq!(
            p.first_error(),
            Some(&Diagnostic::UnknownFeature { name: "Agee".into() })
        );
        let p = codec.parse_sentence("Age is x");
        assert_eq!(p.first_error().unwrap().kind(), "type-mismatch");
        let p = codec.parse_sentence("garbage");
        assert_eq!(p.first_error().unwrap().kind(), "malformed");
    }

    #[test]
    fn decode_policies() {
        let (codec, row) = adult();
        let full = codec.encode_row(&row, &Permutation::identity(4));
        assert_eq!(codec.decode_sentence(&full, DecodePolicy::Strict).unwrap(), row);

        let partial = "Age is 1 8, Education is HS-grad, Income is ≤ 50K";
        let rej = codec.decode_sentence(partial, DecodePolicy::Strict).unwrap_err();
        assert_eq!(rej.reasons[0].kind(), "missing-feature");
        let r = codec.decode_sentence(partial, DecodePolicy::Partial).unwrap();
        assert!(r[2].is_missing());
        assert_eq!(r[1].text(), "HS-grad");
        assert!(codec.decode_sentence("", DecodePolicy::Partial).is_err());
    }

    #[test]
    fn quoting_round_trips() {
        let schema = Schema::features(vec![
            Column::new("a", ColumnKind::Categorical),
            Column::new("b", ColumnKind::Categorical),
        ])
        .unwrap();
        let codec = TextCodec::new(schema, CodecConfig::default()).unwrap();
        for v in ["x, y", "say \"hi\"", " padded ", "", "a is b", ",", "\""] {
            let row = Row::new(vec![Cell::category(v), Cell::category("z")]);
            let text = codec.encode_row(&row, &Permutation::from_mapping(vec![1, 0]).unwrap());
            assert_eq!(
                codec.decode_sentence(&text, DecodePolicy::Strict).unwrap(),
                row,
                "{text}"
            );
        }
    }

    #[test]
    fn missing_cells_are_omitted() {
        let (codec, mut row) = adult();
        row[1] = Cell::Missing;
        assert_eq!(
            codec.encode_row(&row, &Permutation::identity(4)),
            "Age is 1 8, Occupation is Machine-op-inspct, Income is ≤ 50K"
        );
    }

    #[test]
    fn dummy_names() {
        let (codec, row) = adult();
        let dummy = TextCodec::new(
            codec.schema().clone(),
            CodecConfig {
                use_real_feature_names: false,
                ..CodecConfig::default()
            },
        )
        .unwrap();
        let text = dummy.encode_row(&row, &Permutation::identity(4));
        assert!(text.starts_with("V1 is 1 8, V2 is HS-grad"));
        assert_eq!(dummy.decode_sentence(&text, DecodePolicy::Strict).unwrap(), row);
    }

    #[test]
    fn rejects_unserializable_names() {
        for name in ["a, b", "x is y", " a", "q\"uote"] {
            let schema = Schema::features(vec![Column::new(name, ColumnKind::Categorical)]).unwrap();
            assert!(TextCodec::new(schema, CodecConfig::default()).is_err(), "{name}");
        }
    }

    #[test]
    fn permutation_inverse() {
        let p = random_permutation(7, 11);
        let items: Vec<usize> = (0..7).collect();
        assert_eq!(p.inverse().apply(&p.apply(&items)), items);
        assert!(Permutation::from_mapping(vec![0, 0]).is_err());
    }
}
