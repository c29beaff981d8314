//! Conditional row generation.
//!
//! Every attempt ("slot") draws its own seed from `(master seed, slot index)`,
//! so results do not depend on how slots are spread over threads.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{DecodePolicy, RejectReason, Rejection, TextCodec};
use crate::error::{Error, PartialSample, Result};
use crate::lm::plugin::PluginLm;
use crate::lm::{check_sampling_args, detokenize, GenerativeBackend, EOS_ID};
use crate::rng::{self, streams, Rng};
use crate::table::{Cell, ColumnKind, Row, Schema, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStrategy {
    /// `"<feature> is "`.
    FeatureName,
    /// `"<feature> is <value>, "`; for whole tables the label is the prompted
    /// feature and its value is drawn from the training labels.
    OnePair,
    /// Several `<feature> is <value>` clauses in random order, then `", "`.
    MultiPair,
    /// Nothing but the begin-of-sentence token.
    Unconditional,
}

impl std::str::FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature-name" => Ok(PromptStrategy::FeatureName),
            "one-pair" => Ok(PromptStrategy::OnePair),
            "multi-pair" => Ok(PromptStrategy::MultiPair),
            "unconditional" => Ok(PromptStrategy::Unconditional),
            _ => Err(Error::InvalidArgument(format!("unknown prompt strategy `{s}`"))),
        }
    }
}

/// A concrete prompt over schema columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub strategy: PromptStrategy,
    pub pairs: Vec<(usize, Cell)>,
    pub start_feature: Option<usize>,
}

impl Prompt {
    pub fn feature_name(start: Option<usize>) -> Self {
        Prompt {
            strategy: PromptStrategy::FeatureName,
            pairs: Vec::new(),
            start_feature: start,
        }
    }

    pub fn one_pair(column: usize, value: Cell) -> Self {
        Prompt {
            strategy: PromptStrategy::OnePair,
            pairs: vec![(column, value)],
            start_feature: None,
        }
    }

    pub fn multi_pair(pairs: Vec<(usize, Cell)>) -> Self {
        Prompt {
            strategy: PromptStrategy::MultiPair,
            pairs,
            start_feature: None,
        }
    }

    pub fn unconditional() -> Self {
        Prompt {
            strategy: PromptStrategy::Unconditional,
            pairs: Vec::new(),
            start_feature: None,
        }
    }

    pub fn validate(&self, codec: &TextCodec) -> Result<()> {
        let schema = codec.schema();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let expected = match self.strategy {
            PromptStrategy::FeatureName | PromptStrategy::Unconditional => Some(0),
            PromptStrategy::OnePair => Some(1),
            PromptStrategy::MultiPair => None,
        };
        if expected.is_some_and(|n| n != self.pairs.len()) || self.pairs.is_empty() && expected.is_none()
        {
            return bad(format!(
                "{:?} prompt cannot carry {} pairs",
                self.strategy,
                self.pairs.len()
            ));
        }
        let mut seen = BTreeSet::new();
        for (col, cell) in &self.pairs {
            if !codec.serialized_columns().contains(col) {
                return bad(format!("prompt column {col} is not serialized"));
            }
            let c = schema.column(*col);
            if !seen.insert(*col) {
                return bad(format!("prompt repeats `{}`", c.name));
            }
            if cell.is_missing() || !cell.kind_matches(c.kind) {
                return bad(format!("prompt value for `{}` does not fit its column", c.name));
            }
        }
        if let Some(s) = self.start_feature {
            if !codec.serialized_columns().contains(&s) {
                return bad(format!("start feature {s} is not serialized"));
            }
        }
        Ok(())
    }
}

/// Prompt text as fed to the model.
pub fn render_prompt(prompt: &Prompt, codec: &TextCodec, seed: u64) -> String {
    let sep = codec.separator();
    match prompt.strategy {
        PromptStrategy::Unconditional => String::new(),
        PromptStrategy::FeatureName => {
            let col = prompt.start_feature.unwrap_or_else(|| {
                *codec
                    .serialized_columns()
                    .choose(&mut rng::seeded(seed))
                    .expect("codec serializes at least one column")
            });
            format!("{}{}", codec.rendered_name(col), crate::codec::IS)
        }
        PromptStrategy::OnePair | PromptStrategy::MultiPair => {
            let mut pairs: Vec<&(usize, Cell)> = prompt.pairs.iter().collect();
            if prompt.strategy == PromptStrategy::MultiPair {
                pairs.shuffle(&mut rng::seeded(seed));
            }
            let mut out = String::new();
            for (col, cell) in pairs {
                if let Some(c) = codec.render_clause(*col, cell) {
                    out.push_str(&c);
                    out.push_str(sep);
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_tokens: usize,
    pub max_attempts_per_row: usize,
    pub seed: u64,
    /// Reject rows whose categorical values were never seen in fine-tuning.
    pub categorical_clamp: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            max_tokens: 256,
            max_attempts_per_row: 20,
            seed: 0,
            categorical_clamp: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        check_sampling_args(self.temperature, self.max_tokens)?;
        if self.max_attempts_per_row == 0 {
            return Err(Error::InvalidArgument("max_attempts_per_row must be >= 1".into()));
        }
        Ok(())
    }
}

/// Turns a prompt into a completed sentence (prompt included).
pub trait Generator: Send + Sync {
    fn complete(&self, prompt: &str, cfg: &SamplingConfig, separator: &str, rng: &mut Rng) -> Result<String>;

    /// Whether calls may run concurrently with per-call seeds.
    fn parallel_safe(&self) -> bool {
        true
    }
}

impl<B: GenerativeBackend + ?Sized> Generator for B {
    fn complete(&self, prompt: &str, cfg: &SamplingConfig, separator: &str, rng: &mut Rng) -> Result<String> {
        let ids = self.vocab().encode_prompt(prompt, separator);
        let cont = self.sample_continuation(&ids, cfg.max_tokens, cfg.temperature, rng);
        let body: Vec<&str> = cont
            .iter()
            .take_while(|&&t| t != EOS_ID)
            .map(|&t| self.vocab().token(t))
            .collect();
        Ok(format!("{prompt}{}", detokenize(&body, separator)))
    }
}

impl Generator for PluginLm {
    fn complete(&self, prompt: &str, _: &SamplingConfig, _: &str, _: &mut Rng) -> Result<String> {
        PluginLm::complete(self, prompt)
    }

    fn parallel_safe(&self) -> bool {
        false
    }
}

/// Categorical value sets of the fine-tuning table.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSets(Vec<Option<BTreeSet<String>>>);

impl ValueSets {
    pub fn from_table(table: &Table) -> Self {
        let sets = table.categorical_values();
        ValueSets(
            table
                .schema
                .columns()
                .iter()
                .zip(sets)
                .map(|(c, s)| (c.kind == ColumnKind::Categorical).then_some(s))
                .collect(),
        )
    }

    pub fn allows(&self, column: usize, cell: &Cell) -> bool {
        match (self.0.get(column), cell) {
            (Some(Some(set)), Cell::Category(v)) => set.contains(v),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub requested: usize,
    pub accepted: usize,
    pub attempted: usize,
    pub acceptance_rate: f64,
    /// Rejection counts keyed by reason kind.
    pub rejections: BTreeMap<String, usize>,
    /// Attempts spent on each accepted row.
    pub attempts_per_row: Vec<usize>,
}

impl SamplingReport {
    fn record(&mut self, rejection: &Rejection) {
        for r in &rejection.reasons {
            *self.rejections.entry(r.kind().to_string()).or_insert(0) += 1;
        }
    }

    fn finish(&mut self) {
        self.acceptance_rate = if self.attempted == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempted as f64
        };
    }

    /// Associative merge of two reports.
    pub fn merge(&mut self, other: &SamplingReport) {
        self.requested += other.requested;
        self.accepted += other.accepted;
        self.attempted += other.attempted;
        for (k, v) in &other.rejections {
            *self.rejections.entry(k.clone()).or_insert(0) += v;
        }
        self.attempts_per_row.extend(&other.attempts_per_row);
        self.finish();
    }
}

/// Everything an attempt needs besides its prompt and seed.
pub struct SampleContext<'a> {
    pub generator: &'a dyn Generator,
    pub codec: &'a TextCodec,
    pub config: &'a SamplingConfig,
    /// Value sets used when `categorical_clamp` is on.
    pub values: Option<&'a ValueSets>,
}

impl SampleContext<'_> {
    fn attempt(
        &self,
        prompt: &Prompt,
        policy: DecodePolicy,
        seed: u64,
    ) -> Result<std::result::Result<Row, Rejection>> {
        let text_prompt = render_prompt(prompt, self.codec, rng::derive(seed, 0));
        let mut r = rng::seeded(rng::derive(seed, 1));
        let text = self
            .generator
            .complete(&text_prompt, self.config, self.codec.separator(), &mut r)?;
        let mut row = match self.codec.decode_sentence(&text, policy) {
            Ok(row) => row,
            Err(rej) => return Ok(Err(rej)),
        };
        for (col, cell) in &prompt.pairs {
            row[*col] = cell.clone();
        }
        if self.config.categorical_clamp {
            if let Some(values) = self.values {
                let prompted: BTreeSet<usize> = prompt.pairs.iter().map(|p| p.0).collect();
                let reasons: Vec<RejectReason> = row
                    .iter()
                    .enumerate()
                    .filter(|(j, c)| !prompted.contains(j) && !values.allows(*j, c))
                    .map(|(j, c)| RejectReason::Clamp {
                        name: self.codec.schema().column(j).name.clone(),
                        value: c.text().to_string(),
                    })
                    .collect();
                if !reasons.is_empty() {
                    return Ok(Err(Rejection { reasons }));
                }
            }
        }
        Ok(Ok(row))
    }

    fn run_slots<T: Send>(
        &self,
        slots: std::ops::Range<usize>,
        f: impl Fn(usize) -> Result<T> + Sync + Send,
    ) -> Result<Vec<T>> {
        if self.generator.parallel_safe() {
            slots.into_par_iter().map(f).collect()
        } else {
            slots.map(f).collect()
        }
    }
}

/// Samples one row, retrying up to `max_attempts_per_row` times.
pub fn sample_row(
    ctx: &SampleContext,
    prompt: &Prompt,
    policy: DecodePolicy,
) -> Result<(std::result::Result<Row, Vec<Rejection>>, usize)> {
    ctx.config.validate()?;
    prompt.validate(ctx.codec)?;
    let base = rng::derive(ctx.config.seed, streams::SAMPLE);
    let mut rejections = Vec::new();
    for a in 0..ctx.config.max_attempts_per_row {
        match ctx.attempt(prompt, policy, rng::derive(base, a as u64))? {
            Ok(row) => return Ok((Ok(row), a + 1)),
            Err(rej) => rejections.push(rej),
        }
    }
    Ok((Err(rejections), ctx.config.max_attempts_per_row))
}

/// How each slot of a table-sampling run is prompted.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptTemplate {
    Fixed(Prompt),
    /// One-pair prompt on `column` with a value drawn per slot from
    /// `values` (e.g. the training labels, giving their empirical marginal).
    DrawnPair { column: usize, values: Vec<Cell> },
}

impl PromptTemplate {
    pub fn for_strategy(strategy: PromptStrategy, train: &Table) -> Result<Self> {
        Ok(match strategy {
            PromptStrategy::FeatureName => PromptTemplate::Fixed(Prompt::feature_name(None)),
            PromptStrategy::Unconditional => PromptTemplate::Fixed(Prompt::unconditional()),
            PromptStrategy::OnePair => {
                let column = train.schema.label_index().ok_or_else(|| {
                    Error::InvalidArgument("one-pair table sampling needs a label column".into())
                })?;
                let values: Vec<Cell> = train
                    .rows
                    .iter()
                    .map(|r| r[column].clone())
                    .filter(|c| !c.is_missing())
                    .collect();
                if values.is_empty() {
                    return Err(Error::InvalidArgument("no observed labels to prompt with".into()));
                }
                PromptTemplate::DrawnPair { column, values }
            }
            PromptStrategy::MultiPair => {
                return Err(Error::InvalidArgument(
                    "multi-pair prompts need observed cells; use impute".into(),
                ))
            }
        })
    }

    fn prompt(&self, seed: u64) -> Prompt {
        match self {
            PromptTemplate::Fixed(p) => p.clone(),
            PromptTemplate::DrawnPair { column, values } => {
                let v = values.choose(&mut rng::seeded(seed)).expect("non-empty");
                Prompt::one_pair(*column, v.clone())
            }
        }
    }
}

/// Samples until `count` rows are accepted or `count × max_attempts_per_row`
/// attempts are spent. The label cell is kept only when it was prompted.
pub fn sample_table(
    ctx: &SampleContext,
    template: &PromptTemplate,
    count: usize,
) -> Result<(Table, SamplingReport)> {
    ctx.config.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if let PromptTemplate::Fixed(p) = template {
        p.validate(ctx.codec)?;
    }
    let schema: &Schema = ctx.codec.schema();
    let label = schema.label_index();
    let budget = count.saturating_mul(ctx.config.max_attempts_per_row);
    let base = rng::derive(ctx.config.seed, streams::SAMPLE);
    let mut report = SamplingReport {
        requested: count,
        ..SamplingReport::default()
    };
    let mut rows = Vec::with_capacity(count);
    let mut since_last = 0;
    let mut next = 0;
    while rows.len() < count && next < budget {
        let want = count - rows.len();
        let chunk = (want + want / 4 + 8).min(budget - next);
        let results = ctx.run_slots(next..next + chunk, |slot| {
            let seed = rng::derive(base, slot as u64);
            let prompt = template.prompt(rng::derive(seed, 2));
            let out = ctx.attempt(&prompt, DecodePolicy::Strict, seed)?;
            Ok((prompt, out))
        })?;
        for (prompt, out) in results {
            if rows.len() == count {
                break;
            }
            report.attempted += 1;
            since_last += 1;
            match out {
                Ok(mut row) => {
                    if let Some(l) = label {
                        if !prompt.pairs.iter().any(|p| p.0 == l) {
                            row[l] = Cell::Missing;
                        }
                    }
                    rows.push(row);
                    report.attempts_per_row.push(since_last);
                    since_last = 0;
                }
                Err(rej) => report.record(&rej),
            }
        }
        next += chunk;
    }
    report.accepted = rows.len();
    report.finish();
    log::debug!(
        "sampled {}/{} rows in {} attempts",
        report.accepted,
        count,
        report.attempted
    );
    let table = Table {
        schema: schema.clone(),
        rows,
        source_id: "synthetic".to_string(),
    };
    if table.rows.len() < count {
        return Err(Error::SamplingExhausted(Box::new(PartialSample {
            table,
            report,
            requested: count,
        })));
    }
    Ok((table, report))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub sampling: SamplingReport,
    pub missing_before: usize,
    pub model_filled: usize,
    pub fallback_filled: usize,
    /// Rows that needed at least one fallback cell.
    pub fallback_rows: Vec<usize>,
}

/// Per-column fallback: lower median of numeric cells (original text kept),
/// most frequent category (ties to the smallest value).
pub fn fallback_values(table: &Table) -> Vec<Option<Cell>> {
    (0..table.schema.len())
        .map(|j| {
            let observed: Vec<&Cell> = table
                .rows
                .iter()
                .map(|r| &r[j])
                .filter(|c| !c.is_missing())
                .collect();
            if observed.is_empty() {
                return None;
            }
            match table.schema.column(j).kind {
                ColumnKind::Numerical => {
                    let mut v = observed;
                    v.sort_by(|a, b| a.as_f64().unwrap().total_cmp(&b.as_f64().unwrap()));
                    Some(v[(v.len() - 1) / 2].clone())
                }
                ColumnKind::Categorical => {
                    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                    for c in observed {
                        *counts.entry(c.text()).or_insert(0) += 1;
                    }
                    let best = counts.values().copied().max().unwrap_or(0);
                    counts
                        .into_iter()
                        .find(|&(_, n)| n == best)
                        .map(|(v, _)| Cell::category(v))
                }
            }
        })
        .collect()
}

/// Fills the `Missing` feature cells of every row from multi-pair prompts of
/// its observed cells. Observed cells and labels are never changed. Rows the
/// model cannot complete within the attempt budget keep the best attempt's
/// cells and take the rest from [`fallback_values`] of `fallback_source`.
pub fn impute_rows(
    ctx: &SampleContext,
    table: &Table,
    fallback_source: &Table,
) -> Result<(Table, ImputationReport)> {
    ctx.config.validate()?;
    table.schema.check_compatible(ctx.codec.schema())?;
    let features = table.schema.feature_indices();
    let fallback = fallback_values(fallback_source);
    let base = rng::derive(ctx.config.seed, streams::IMPUTE);
    let attempts = ctx.config.max_attempts_per_row;
    let serialized = ctx.codec.serialized_columns();

    struct RowResult {
        row: Row,
        attempted: usize,
        accepted: bool,
        rejections: Vec<Rejection>,
        model: usize,
        fallback: usize,
    }

    let work = |i: usize| -> Result<RowResult> {
        let orig = &table.rows[i];
        let missing: Vec<usize> = features.iter().copied().filter(|&j| orig[j].is_missing()).collect();
        let mut out = RowResult {
            row: orig.clone(),
            attempted: 0,
            accepted: false,
            rejections: Vec::new(),
            model: 0,
            fallback: 0,
        };
        if missing.is_empty() {
            return Ok(out);
        }
        let pairs: Vec<(usize, Cell)> = serialized
            .iter()
            .filter(|&&j| !orig[j].is_missing())
            .map(|&j| (j, orig[j].clone()))
            .collect();
        let mut best: Option<(usize, Row)> = None;
        if !pairs.is_empty() {
            let prompt = Prompt::multi_pair(pairs);
            let row_base = rng::derive(base, i as u64);
            for a in 0..attempts {
                out.attempted += 1;
                match ctx.attempt(&prompt, DecodePolicy::Partial, rng::derive(row_base, a as u64))? {
                    Ok(gen) => {
                        let unfilled: Vec<usize> =
                            missing.iter().copied().filter(|&j| gen[j].is_missing()).collect();
                        let filled = missing.len() - unfilled.len();
                        if best.as_ref().is_none_or(|(b, _)| filled > *b) {
                            best = Some((filled, gen));
                        }
                        if unfilled.is_empty() {
                            out.accepted = true;
                            break;
                        }
                        out.rejections.push(Rejection {
                            reasons: unfilled
                                .iter()
                                .map(|&j| RejectReason::MissingFeature {
                                    name: table.schema.column(j).name.clone(),
                                })
                                .collect(),
                        });
                    }
                    Err(rej) => out.rejections.push(rej),
                }
            }
        }
        for &j in &missing {
            match best.as_ref().map(|(_, g)| &g[j]).filter(|c| !c.is_missing()) {
                Some(c) => {
                    out.row[j] = c.clone();
                    out.model += 1;
                }
                None => {
                    out.row[j] = fallback[j].clone().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "column `{}` has no observed value to fall back on",
                            table.schema.column(j).name
                        ))
                    })?;
                    out.fallback += 1;
                }
            }
        }
        Ok(out)
    };

    let results = ctx.run_slots(0..table.len(), work)?;
    let mut report = ImputationReport {
        missing_before: table.missing_feature_cells(),
        ..ImputationReport::default()
    };
    report.sampling.requested = results.iter().filter(|r| r.attempted > 0).count();
    let mut rows = Vec::with_capacity(table.len());
    for (i, r) in results.into_iter().enumerate() {
        report.sampling.attempted += r.attempted;
        for rej in &r.rejections {
            report.sampling.record(rej);
        }
        if r.accepted {
            report.sampling.accepted += 1;
            report.sampling.attempts_per_row.push(r.attempted);
        }
        report.model_filled += r.model;
        report.fallback_filled += r.fallback;
        if r.fallback > 0 {
            report.fallback_rows.push(i);
        }
        rows.push(r.row);
    }
    report.sampling.finish();
    Ok((table.with_rows(rows), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::table::Column;

    struct Fixed(&'static str);

    impl Generator for Fixed {
        fn complete(&self, prompt: &str, _: &SamplingConfig, _: &str, _: &mut Rng) -> Result<String> {
            Ok(format!("{prompt}{}", self.0))
        }
    }

    fn codec() -> TextCodec {
        let schema = Schema::labeled(
            vec![
                Column::new("Age", ColumnKind::Numerical),
                Column::new("Income", ColumnKind::Categorical),
            ],
            "Income",
            crate::table::Task::Classification,
            Some(2),
        )
        .unwrap();
        TextCodec::new(schema, CodecConfig::default()).unwrap()
    }

    #[test]
    fn prompt_rendering() {
        let c = codec();
        let one = Prompt::one_pair(1, Cell::category("≤ 50K"));
        assert_eq!(render_prompt(&one, &c, 0), "Income is ≤ 50K, ");
        assert_eq!(render_prompt(&Prompt::feature_name(Some(0)), &c, 0), "Age is ");
        let multi = Prompt::multi_pair(vec![(1, Cell::category("≤ 50K"))]);
        assert_eq!(render_prompt(&multi, &c, 7), render_prompt(&one, &c, 7));
        assert_eq!(render_prompt(&Prompt::unconditional(), &c, 0), "");
    }

    #[test]
    fn prompted_values_are_copied() {
        let c = codec();
        let cfg = SamplingConfig::default();
        let g = Fixed("Age is 3");
        let ctx = SampleContext {
            generator: &g,
            codec: &c,
            config: &cfg,
            values: None,
        };
        let tpl = PromptTemplate::Fixed(Prompt::one_pair(1, Cell::category(">50K")));
        let (t, rep) = sample_table(&ctx, &tpl, 5).unwrap();
        assert_eq!(rep.acceptance_rate, 1.0);
        assert!(t.rows.iter().all(|r| r[1] == Cell::category(">50K")));
    }

    #[test]
    fn exhausted_budget_reports_partial_table() {
        let c = codec();
        let cfg = SamplingConfig {
            max_attempts_per_row: 3,
            ..SamplingConfig::default()
        };
        let g = Fixed("garbage");
        let ctx = SampleContext {
            generator: &g,
            codec: &c,
            config: &cfg,
            values: None,
        };
        let err = sample_table(&ctx, &PromptTemplate::Fixed(Prompt::unconditional()), 4).unwrap_err();
        match err {
            Error::SamplingExhausted(p) => {
                assert_eq!(p.table.rows.len(), 0);
                assert_eq!(p.report.attempted, 12);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn fallback_is_mode_and_lower_median() {
        let t = crate::table::read_csv(
            "a,b\n3,x\n1,y\n2,y\n10,x\n".as_bytes(),
            "t",
            &Default::default(),
        )
        .unwrap();
        let f = fallback_values(&t);
        assert_eq!(f[0], Cell::number("2"));
        assert_eq!(f[1], Some(Cell::category("x")));
    }
}
