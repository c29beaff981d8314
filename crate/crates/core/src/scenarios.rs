//! End-to-end protocols: privacy, low-resource augmentation, imputation,
//! imbalance, and the component ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{label_synthetic, lm_label_ablation, train_with_augmentation, BackboneConfig, FittedPredictor};
use crate::codec::{CodecConfig, TextCodec};
use crate::error::{Error, Result};
use crate::lm::plugin::PluginLm;
use crate::lm::{checkpoint, table_sentences, Backend, BackendConfig, BackendKind, Vocabulary};
use crate::metrics::{accuracy, auc, mean_std, r2, MetricKind};
use crate::rng;
use crate::sampler::{
    impute_rows, sample_table, Generator, Prompt, PromptStrategy, PromptTemplate, SampleContext,
    SamplingConfig, SamplingReport, ValueSets,
};
use crate::table::{
    apply_missingness, binary_classes, downsample_minority, split, Cell, Mechanism, MissingnessSpec,
    Table, Task,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Privacy,
    LowResource,
    Imputation,
    Imbalance,
    Ablation,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Privacy => "privacy",
            ScenarioKind::LowResource => "low-resource",
            ScenarioKind::Imputation => "imputation",
            ScenarioKind::Imbalance => "imbalance",
            ScenarioKind::Ablation => "ablation",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "privacy" => Ok(ScenarioKind::Privacy),
            "low-resource" => Ok(ScenarioKind::LowResource),
            "imputation" => Ok(ScenarioKind::Imputation),
            "imbalance" => Ok(ScenarioKind::Imbalance),
            "ablation" => Ok(ScenarioKind::Ablation),
            _ => Err(Error::InvalidArgument(format!("unknown scenario `{s}`"))),
        }
    }
}

/// Missingness settings for the imputation scenario; the seed comes from
/// the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingnessConfig {
    pub mechanism: Mechanism,
    pub miss_ratio: f64,
    /// MAR anchor; defaults to the first numerical feature.
    pub anchor_column: Option<String>,
}

impl Default for MissingnessConfig {
    fn default() -> Self {
        MissingnessConfig {
            mechanism: Mechanism::Mcar,
            miss_ratio: 0.3,
            anchor_column: None,
        }
    }
}

/// Everything a scenario run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub backbone: BackboneConfig,
    pub codec: CodecConfig,
    pub sampling: SamplingConfig,
    /// Prompting for privacy / low-resource synthesis.
    pub strategy: PromptStrategy,
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    /// Neural pre-training epochs (one fresh permutation per row per epoch).
    pub pretrain_epochs: usize,
    /// Permutations per row in the n-gram pre-training corpus.
    pub pretrain_copies: usize,
    /// Permutations per row in the fine-tuning corpus.
    pub finetune_copies: usize,
    /// Optimizer steps for the neural model; any positive value enables the
    /// single n-gram fine-tuning pass.
    pub finetune_steps: usize,
    pub pretrain_seed: u64,
    /// Copies of the original table after the synthetic rows.
    pub upweight: usize,
    /// Training rows kept in the low-resource scenario.
    pub low_resource_rows: Option<usize>,
    pub missingness: MissingnessConfig,
    pub imbalance_ratio: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: BackendConfig::default(),
            backbone: BackboneConfig::default(),
            codec: CodecConfig::default(),
            sampling: SamplingConfig::default(),
            strategy: PromptStrategy::FeatureName,
            seeds: (0..10).collect(),
            train_fraction: 0.8,
            pretrain_epochs: 1,
            pretrain_copies: 2,
            finetune_copies: 4,
            finetune_steps: 200,
            pretrain_seed: 0,
            upweight: 1,
            low_resource_rows: None,
            missingness: MissingnessConfig::default(),
            imbalance_ratio: 50,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} not in (0, 1)",
                self.train_fraction
            )));
        }
        if self.pretrain_copies == 0 || self.finetune_copies == 0 {
            return Err(Error::Config("corpus copies must be >= 1".into()));
        }
        if self.upweight == 0 {
            return Err(Error::Config("upweight must be >= 1".into()));
        }
        if self.imbalance_ratio < 2 {
            return Err(Error::Config("imbalance_ratio must be >= 2".into()));
        }
        self.sampling.validate()
    }
}

/// Ablation switches; all off is the full pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub no_pretrain: bool,
    pub no_label: bool,
    pub no_char: bool,
    pub no_names: bool,
}

impl Toggles {
    pub const ARMS: [&'static str; 4] = ["no-pretrain", "no-label", "no-char", "no-names"];

    pub fn single(name: &str) -> Result<Toggles> {
        let mut t = Toggles::default();
        match name {
            "no-pretrain" => t.no_pretrain = true,
            "no-label" => t.no_label = true,
            "no-char" => t.no_char = true,
            "no-names" => t.no_names = true,
            _ => return Err(Error::InvalidArgument(format!("unknown toggle `{name}`"))),
        }
        Ok(t)
    }

    fn codec(&self, base: &CodecConfig) -> CodecConfig {
        let mut c = base.clone();
        if self.no_char {
            c.use_character_numbers = false;
        }
        if self.no_names {
            c.use_real_feature_names = false;
        }
        c
    }
}

/// Where the generator comes from.
#[derive(Clone)]
pub enum ModelSource {
    /// A pre-trained built-in backend, cloned and fine-tuned per seed.
    Pretrained(Backend),
    /// A built-in backend trained from scratch on each seed's data.
    Fresh,
    /// An external generator used as-is.
    Plugin(Arc<PluginLm>),
}

impl std::fmt::Debug for ModelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelSource::Pretrained(b) => write!(f, "Pretrained({})", b.kind().name()),
            ModelSource::Fresh => write!(f, "Fresh"),
            ModelSource::Plugin(p) => write!(f, "Plugin({})", p.command()),
        }
    }
}

impl ModelSource {
    /// SHA-256 of the pre-trained checkpoint bytes, if any.
    pub fn checkpoint_sha256(&self) -> Result<Option<String>> {
        match self {
            ModelSource::Pretrained(b) => Ok(Some(crate::fsutil::sha256_hex(&checkpoint::to_bytes(b)?))),
            _ => Ok(None),
        }
    }
}

/// Tokens every numeric rendering may use.
const NUMBER_CHARS: [&str; 13] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-", "+"];

fn neural_vocab(sentences: &[String], codec: &CodecConfig) -> Result<Vocabulary> {
    let mut v = Vocabulary::build(sentences, codec)?;
    v.extend(NUMBER_CHARS);
    Ok(v)
}

/// Pre-trains a built-in backend on `tables`, each serialized with its own
/// schema under `codec`.
pub fn pretrain_backend(
    cfg: &BackendConfig,
    codec: &CodecConfig,
    tables: &[Table],
    epochs: usize,
    copies: usize,
    seed: u64,
) -> Result<Backend> {
    if tables.is_empty() {
        return Err(Error::InvalidArgument("no pre-training tables".into()));
    }
    let codecs = tables
        .iter()
        .map(|t| TextCodec::new(t.schema.clone(), codec.clone()))
        .collect::<Result<Vec<_>>>()?;
    let sentences_for = |epoch: usize, reps: usize| -> Vec<(String, Vec<String>)> {
        tables
            .iter()
            .zip(&codecs)
            .enumerate()
            .map(|(k, (t, c))| {
                let s = rng::derive(rng::derive(seed, epoch as u64), k as u64);
                (t.source_id.clone(), table_sentences(c, t, reps, s))
            })
            .collect()
    };
    let sep = codec.clause_separator.clone();
    let vocab = match cfg.kind {
        BackendKind::Ngram => Vocabulary::from_tokens(Vec::<String>::new()),
        BackendKind::Neural => {
            let all: Vec<String> = sentences_for(0, 1).into_iter().flat_map(|(_, s)| s).collect();
            neural_vocab(&all, codec)?
        }
    };
    let mut backend = Backend::fresh(cfg, vocab, seed)?;
    let reps = match cfg.kind {
        BackendKind::Ngram => copies,
        BackendKind::Neural => 1,
    };
    let trace = backend.pretrain_with(epochs.max(1), seed, |epoch, b| {
        let mut corpus = crate::lm::Corpus::default();
        for (source, sentences) in sentences_for(epoch, reps) {
            corpus.append(b.encode(&sentences, &source, &sep));
        }
        Ok(corpus)
    })?;
    if let Some(last) = trace.last() {
        log::info!("pre-training done, final epoch NLL {last:.4}");
    }
    Ok(backend)
}

/// Sampling outcome without the per-row attempt list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub requested: usize,
    pub accepted: usize,
    pub attempted: usize,
    pub acceptance_rate: f64,
    pub rejections: BTreeMap<String, usize>,
}

impl From<&SamplingReport> for SamplingSummary {
    fn from(r: &SamplingReport) -> Self {
        SamplingSummary {
            requested: r.requested,
            accepted: r.accepted,
            attempted: r.attempted,
            acceptance_rate: r.acceptance_rate,
            rejections: r.rejections.clone(),
        }
    }
}

/// One arm of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub scenario: ScenarioKind,
    pub arm: String,
    pub seed: u64,
    pub metric: MetricKind,
    /// Backbone trained on the original (or masked / imbalanced) data.
    pub reference: f64,
    pub value: f64,
    /// `reference - value`; positive means the synthetic arm is worse.
    pub gap: f64,
    pub train_rows: usize,
    pub synthetic_rows: usize,
    pub sampling: Option<SamplingSummary>,
    pub details: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub metric: MetricKind,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    pub reference_mean: f64,
    pub gap_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scenario: ScenarioKind,
    pub dataset: String,
    pub config: PipelineConfig,
    /// Pre-trained checkpoint hash per arm that used one.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub provenance: Provenance,
    pub records: Vec<ArmRecord>,
}

impl ScenarioReport {
    /// Arms in first-appearance order with mean and population std.
    pub fn summary(&self) -> Vec<ArmSummary> {
        let mut arms: Vec<&str> = Vec::new();
        for r in &self.records {
            if !arms.contains(&r.arm.as_str()) {
                arms.push(&r.arm);
            }
        }
        arms.into_iter()
            .map(|arm| {
                let rs: Vec<&ArmRecord> = self.records.iter().filter(|r| r.arm == arm).collect();
                let values: Vec<f64> = rs.iter().map(|r| r.value).collect();
                let refs: Vec<f64> = rs.iter().map(|r| r.reference).collect();
                let gaps: Vec<f64> = rs.iter().map(|r| r.gap).collect();
                let (mean, std) = mean_std(&values);
                ArmSummary {
                    arm: arm.to_string(),
                    metric: rs[0].metric,
                    seeds: rs.len(),
                    mean,
                    std,
                    reference_mean: mean_std(&refs).0,
                    gap_mean: mean_std(&gaps).0,
                }
            })
            .collect()
    }

    /// Provenance line followed by one JSON record per arm per seed.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&serde_json::json!({ "provenance": &self.provenance }))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Human-readable table: arm, metric, reference, synthetic, gap.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "scenario: {}  dataset: {}\n{:<14} {:<9} {:>6} {:>10} {:>18} {:>8}\n",
            self.provenance.scenario.name(),
            self.provenance.dataset,
            "arm",
            "metric",
            "seeds",
            "reference",
            "synthetic",
            "gap"
        );
        for s in self.summary() {
            let metric = serde_json::to_value(s.metric)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{:<14} {:<9} {:>6} {:>10.4} {:>10.4} ± {:.4} {:>8.4}",
                s.arm, metric, s.seeds, s.reference_mean, s.mean, s.std, s.gap_mean
            );
        }
        out
    }
}

/// Predicts one fixed label; used when synthetic labels collapse to a
/// single class.
struct Constant {
    label: Cell,
    classes: Vec<String>,
}

impl FittedPredictor for Constant {
    fn predict(&self, features: &Table) -> Result<Vec<Cell>> {
        Ok(vec![self.label.clone(); features.len()])
    }

    fn predict_scores(&self, features: &Table) -> Result<Option<Vec<Vec<f64>>>> {
        let row: Vec<f64> = self
            .classes
            .iter()
            .map(|c| f64::from(u8::from(c == self.label.text())))
            .collect();
        Ok(Some(vec![row; features.len()]))
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }
}

/// Fits the backbone, or a constant predictor (with a note) when the table
/// holds a single class.
fn fit(
    cfg: &BackboneConfig,
    table: &Table,
    classes: &[String],
    notes: &mut Vec<String>,
) -> Result<Box<dyn FittedPredictor>> {
    if table.schema.task() == Some(Task::Classification) {
        let counts = table.class_counts();
        if counts.len() == 1 {
            let label = counts.keys().next().expect("one class").clone();
            notes.push(format!("single-class training table; constant `{label}` predictor"));
            let l = table.schema.label_index().expect("labeled");
            let cell = table.rows.iter().map(|r| &r[l]).find(|c| !c.is_missing()).cloned();
            return Ok(Box::new(Constant {
                label: cell.unwrap_or(Cell::category(label)),
                classes: classes.to_vec(),
            }));
        }
    }
    cfg.fit(table)
}

/// Scores `model` on `test` with the scenario metric. For AUC `positive`
/// names the positive class.
fn evaluate(
    model: &dyn FittedPredictor,
    test: &Table,
    metric: MetricKind,
    positive: Option<&str>,
) -> Result<f64> {
    let l = test
        .schema
        .label_index()
        .ok_or_else(|| Error::Schema("test table has no label".into()))?;
    let truth: Vec<Cell> = test.rows.iter().map(|r| r[l].clone()).collect();
    Ok(match metric {
        MetricKind::Accuracy => accuracy(&model.predict(test)?, &truth)?.value,
        MetricKind::R2 => {
            let p: Vec<f64> = model.predict(test)?.iter().map(|c| c.as_f64().unwrap_or(f64::NAN)).collect();
            let t: Vec<f64> = truth.iter().map(|c| c.as_f64().unwrap_or(f64::NAN)).collect();
            r2(&p, &t)?.value
        }
        MetricKind::Auc => {
            let positive = positive.ok_or_else(|| Error::InvalidArgument("AUC needs a positive class".into()))?;
            let scores = model
                .predict_scores(test)?
                .ok_or_else(|| Error::InvalidArgument("AUC needs class scores".into()))?;
            let k = model.classes().iter().position(|c| c == positive);
            let s: Vec<f64> = scores.iter().map(|r| k.map_or(0.0, |k| r[k])).collect();
            let pos: Vec<bool> = truth.iter().map(|c| c.text() == positive).collect();
            auc(&s, &pos)?.value
        }
        MetricKind::Coverage | MetricKind::AvgRank => {
            return Err(Error::InvalidArgument("not a downstream metric".into()))
        }
    })
}

fn task_metric(table: &Table) -> Result<MetricKind> {
    match table.schema.task() {
        Some(Task::Classification) => Ok(MetricKind::Accuracy),
        Some(Task::Regression) => Ok(MetricKind::R2),
        None => Err(Error::Schema("scenario tables need a label column".into())),
    }
}

/// A per-seed generator: either a fine-tuned built-in backend or a plugin.
enum SeedModel {
    Builtin(Backend),
    Plugin(Arc<PluginLm>),
}

impl SeedModel {
    fn generator(&self) -> &dyn Generator {
        match self {
            SeedModel::Builtin(b) => b,
            SeedModel::Plugin(p) => p.as_ref(),
        }
    }
}

/// Clones (or creates) the backend and fine-tunes it on `data`.
fn finetuned(
    source: &ModelSource,
    cfg: &PipelineConfig,
    codec: &TextCodec,
    data: &Table,
    seed: u64,
) -> Result<SeedModel> {
    let sentences = table_sentences(codec, data, cfg.finetune_copies, seed);
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning table serializes to nothing".into()));
    }
    let mut backend = match source {
        ModelSource::Plugin(p) => return Ok(SeedModel::Plugin(p.clone())),
        ModelSource::Pretrained(b) => b.clone(),
        ModelSource::Fresh => {
            let vocab = match cfg.backend.kind {
                BackendKind::Ngram => Vocabulary::from_tokens(Vec::<String>::new()),
                BackendKind::Neural => neural_vocab(&sentences, codec.config())?,
            };
            Backend::fresh(&cfg.backend, vocab, seed)?
        }
    };
    let corpus = backend.encode(&sentences, &data.source_id, codec.separator());
    // a fresh n-gram has nothing to adapt, so the fine-tuning pass is its only training
    let steps = match (source, backend.kind()) {
        (ModelSource::Fresh, BackendKind::Ngram) => cfg.finetune_steps.max(1),
        _ => cfg.finetune_steps,
    };
    backend.finetune(&corpus, steps, rng::derive(seed, rng::streams::TRAIN))?;
    Ok(SeedModel::Builtin(backend))
}

/// Synthesizes up to `count` feature rows; an exhausted budget keeps the
/// partial table and adds a note.
fn synthesize(
    model: &SeedModel,
    cfg: &PipelineConfig,
    codec: &TextCodec,
    train: &Table,
    template: &PromptTemplate,
    count: usize,
    seed: u64,
    notes: &mut Vec<String>,
) -> Result<(Table, SamplingReport)> {
    let sampling = SamplingConfig {
        seed,
        ..cfg.sampling.clone()
    };
    let values = ValueSets::from_table(train);
    let ctx = SampleContext {
        generator: model.generator(),
        codec,
        config: &sampling,
        values: Some(&values),
    };
    match sample_table(&ctx, template, count) {
        Ok(r) => Ok(r),
        Err(Error::SamplingExhausted(p)) => {
            notes.push(format!(
                "sampling budget exhausted: {}/{} rows",
                p.table.len(),
                p.requested
            ));
            Ok((p.table, p.report))
        }
        Err(e) => Err(e),
    }
}

struct SeedData {
    train: Table,
    test: Table,
}

fn seed_split(table: &Table, cfg: &PipelineConfig, seed: u64) -> Result<SeedData> {
    let (train, test) = split(table, cfg.train_fraction, seed)?;
    Ok(SeedData { train, test })
}

fn codec_for(table: &Table, cfg: &CodecConfig) -> Result<TextCodec> {
    TextCodec::new(table.schema.clone(), cfg.clone())
}

/// Privacy protocol for one seed under `toggles`.
fn privacy_seed(
    table: &Table,
    cfg: &PipelineConfig,
    source: &ModelSource,
    toggles: Toggles,
    arm: &str,
    seed: u64,
) -> Result<ArmRecord> {
    let SeedData { train, test } = seed_split(table, cfg, seed)?;
    let metric = task_metric(table)?;
    let codec = codec_for(&train, &toggles.codec(&cfg.codec))?;
    let mut notes = Vec::new();
    let classes = train.class_values();
    let reference_model = fit(&cfg.backbone, &train, &classes, &mut notes)?;
    let reference = evaluate(reference_model.as_ref(), &test, metric, None)?;

    let model = finetuned(source, cfg, &codec, &train, seed)?;
    let template = PromptTemplate::for_strategy(cfg.strategy, &train)?;
    let (synth, report) = synthesize(&model, cfg, &codec, &train, &template, train.len(), seed, &mut notes)?;
    let mut details = BTreeMap::new();
    let labeled = if synth.is_empty() {
        synth
    } else if toggles.no_label {
        let fallback = majority(&train);
        let sampling = SamplingConfig {
            seed,
            ..cfg.sampling.clone()
        };
        let (t, r) = lm_label_ablation(model.generator(), &codec, &synth, &classes, &fallback, &sampling)?;
        details.insert("label_fallback_rows".into(), r.fallback_rows.len() as f64);
        t
    } else {
        label_synthetic(reference_model.as_ref(), &synth)?
    };
    let value = if labeled.is_empty() {
        notes.push("no synthetic rows; arm scored as the reference".into());
        reference
    } else {
        let m = fit(&cfg.backbone, &labeled, &classes, &mut notes)?;
        evaluate(m.as_ref(), &test, metric, None)?
    };
    Ok(ArmRecord {
        scenario: ScenarioKind::Privacy,
        arm: arm.to_string(),
        seed,
        metric,
        reference,
        value,
        gap: reference - value,
        train_rows: train.len(),
        synthetic_rows: labeled.len(),
        sampling: Some((&report).into()),
        details,
        notes,
    })
}

fn majority(train: &Table) -> Cell {
    let counts = train.class_counts();
    let best = counts.values().copied().max().unwrap_or(0);
    let label = counts
        .into_iter()
        .find(|&(_, n)| n == best)
        .map(|(c, _)| c)
        .unwrap_or_default();
    let l = train.schema.label_index().expect("labeled");
    train
        .rows
        .iter()
        .map(|r| &r[l])
        .find(|c| c.text() == label)
        .cloned()
        .unwrap_or(Cell::category(label))
}

fn run_seeds(
    cfg: &PipelineConfig,
    f: impl Fn(u64) -> Result<ArmRecord> + Sync,
) -> Result<Vec<ArmRecord>> {
    cfg.seeds
        .par_iter()
        .map(|&s| f(s).map_err(|e| e.context(format!("seed {s}"))))
        .collect()
}

fn provenance(
    kind: ScenarioKind,
    table: &Table,
    cfg: &PipelineConfig,
    checkpoints: BTreeMap<String, String>,
) -> Provenance {
    Provenance {
        scenario: kind,
        dataset: table.source_id.clone(),
        config: cfg.clone(),
        checkpoints,
    }
}

fn checkpoint_map(arm: &str, source: &ModelSource) -> Result<BTreeMap<String, String>> {
    Ok(source
        .checkpoint_sha256()?
        .map(|h| BTreeMap::from([(arm.to_string(), h)]))
        .unwrap_or_default())
}

/// Train on synthetic rows only, test on the original test split.
pub fn run_privacy(table: &Table, cfg: &PipelineConfig, source: &ModelSource) -> Result<ScenarioReport> {
    cfg.validate()?;
    let records = run_seeds(cfg, |s| privacy_seed(table, cfg, source, Toggles::default(), "synthetic", s))
        .map_err(|e| e.context("privacy scenario"))?;
    Ok(ScenarioReport {
        provenance: provenance(ScenarioKind::Privacy, table, cfg, checkpoint_map("synthetic", source)?),
        records,
    })
}

/// Train on synthetic rows plus the (optionally shrunk) original rows.
pub fn run_low_resource(table: &Table, cfg: &PipelineConfig, source: &ModelSource) -> Result<ScenarioReport> {
    cfg.validate()?;
    let records = run_seeds(cfg, |seed| {
        let SeedData { train, test } = seed_split(table, cfg, seed)?;
        let train = match cfg.low_resource_rows {
            Some(n) if n < train.len() => train.with_rows(train.rows[..n].to_vec()),
            _ => train,
        };
        let metric = task_metric(table)?;
        let codec = codec_for(&train, &cfg.codec)?;
        let mut notes = Vec::new();
        let classes = train.class_values();
        let reference_model = fit(&cfg.backbone, &train, &classes, &mut notes)?;
        let reference = evaluate(reference_model.as_ref(), &test, metric, None)?;
        let model = finetuned(source, cfg, &codec, &train, seed)?;
        let template = PromptTemplate::for_strategy(cfg.strategy, &train)?;
        let (synth, report) =
            synthesize(&model, cfg, &codec, &train, &template, train.len(), seed, &mut notes)?;
        let labeled = if synth.is_empty() {
            synth
        } else {
            label_synthetic(reference_model.as_ref(), &synth)?
        };
        let (m, semantics) = train_with_augmentation(&cfg.backbone, &labeled, &train, cfg.upweight)?;
        notes.push(format!(
            "augmentation: {}",
            serde_json::to_value(semantics).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
        ));
        let value = evaluate(m.as_ref(), &test, metric, None)?;
        Ok(ArmRecord {
            scenario: ScenarioKind::LowResource,
            arm: "original+synthetic".into(),
            seed,
            metric,
            reference,
            value,
            gap: reference - value,
            train_rows: train.len(),
            synthetic_rows: labeled.len(),
            sampling: Some((&report).into()),
            details: BTreeMap::new(),
            notes,
        })
    })
    .map_err(|e| e.context("low-resource scenario"))?;
    Ok(ScenarioReport {
        provenance: provenance(
            ScenarioKind::LowResource,
            table,
            cfg,
            checkpoint_map("original+synthetic", source)?,
        ),
        records,
    })
}

/// The missingness spec for one seed, with the MAR anchor resolved.
pub fn missingness_for(table: &Table, m: &MissingnessConfig, seed: u64) -> Result<MissingnessSpec> {
    Ok(match m.mechanism {
        Mechanism::Mcar => MissingnessSpec::mcar(m.miss_ratio, seed),
        Mechanism::Mar => {
            let anchor = match &m.anchor_column {
                Some(a) => a.clone(),
                None => table
                    .schema
                    .feature_indices()
                    .into_iter()
                    .find(|&j| table.schema.column(j).kind == crate::table::ColumnKind::Numerical)
                    .map(|j| table.schema.column(j).name.clone())
                    .ok_or_else(|| Error::Config("MAR needs a numerical anchor column".into()))?,
            };
            MissingnessSpec::mar(m.miss_ratio, anchor, seed)
        }
    })
}

/// Mask, impute with multi-pair prompts, train on the completed table.
pub fn run_imputation(table: &Table, cfg: &PipelineConfig, source: &ModelSource) -> Result<ScenarioReport> {
    cfg.validate()?;
    let records = run_seeds(cfg, |seed| {
        let SeedData { train, test } = seed_split(table, cfg, seed)?;
        let metric = task_metric(table)?;
        let spec = missingness_for(&train, &cfg.missingness, seed)?;
        let masked = apply_missingness(&train, &spec)?;
        let codec = codec_for(&masked, &cfg.codec)?;
        let mut notes = vec!["reference trains on masked data with surrogate fill".to_string()];
        let classes = train.class_values();
        let reference_model = fit(&cfg.backbone, &masked, &classes, &mut notes)?;
        let reference = evaluate(reference_model.as_ref(), &test, metric, None)?;
        let model = finetuned(source, cfg, &codec, &masked, seed)?;
        let sampling = SamplingConfig {
            seed,
            ..cfg.sampling.clone()
        };
        let values = ValueSets::from_table(&masked);
        let ctx = SampleContext {
            generator: model.generator(),
            codec: &codec,
            config: &sampling,
            values: Some(&values),
        };
        let (completed, report) = impute_rows(&ctx, &masked, &masked)?;
        let altered = audit_observed(&masked, &completed);
        let m = fit(&cfg.backbone, &completed, &classes, &mut notes)?;
        let value = evaluate(m.as_ref(), &test, metric, None)?;
        let details = BTreeMap::from([
            ("masked_cells".to_string(), report.missing_before as f64),
            ("model_filled".to_string(), report.model_filled as f64),
            ("fallback_filled".to_string(), report.fallback_filled as f64),
            ("altered_observed".to_string(), altered as f64),
            ("missing_after".to_string(), completed.missing_feature_cells() as f64),
        ]);
        Ok(ArmRecord {
            scenario: ScenarioKind::Imputation,
            arm: format!(
                "imputed-{}",
                match spec.mechanism {
                    Mechanism::Mcar => "mcar",
                    Mechanism::Mar => "mar",
                }
            ),
            seed,
            metric,
            reference,
            value,
            gap: reference - value,
            train_rows: train.len(),
            synthetic_rows: report.fallback_rows.len(),
            sampling: Some((&report.sampling).into()),
            details,
            notes,
        })
    })
    .map_err(|e| e.context("imputation scenario"))?;
    let arm = records.first().map(|r| r.arm.clone()).unwrap_or_default();
    Ok(ScenarioReport {
        provenance: provenance(ScenarioKind::Imputation, table, cfg, checkpoint_map(&arm, source)?),
        records,
    })
}

/// Observed cells of `before` whose value differs in `after`.
pub fn audit_observed(before: &Table, after: &Table) -> usize {
    before
        .rows
        .iter()
        .zip(&after.rows)
        .map(|(b, a)| {
            b.0.iter()
                .zip(&a.0)
                .filter(|(x, y)| !x.is_missing() && x != y)
                .count()
        })
        .sum::<usize>()
        + before.len().abs_diff(after.len())
}

/// Downsample the minority, generate minority rows to parity, score AUC.
pub fn run_imbalance(table: &Table, cfg: &PipelineConfig, source: &ModelSource) -> Result<ScenarioReport> {
    cfg.validate()?;
    let records = run_seeds(cfg, |seed| {
        let SeedData { train, test } = seed_split(table, cfg, seed)?;
        let down = downsample_minority(&train, cfg.imbalance_ratio, seed)?;
        let (major, minor) = binary_classes(&down)?;
        let counts = down.class_counts();
        let need = counts[&major] - counts[&minor];
        let label = down.schema.label_index().expect("labeled");
        let minority_cell = down
            .rows
            .iter()
            .map(|r| &r[label])
            .find(|c| c.text() == minor)
            .cloned()
            .expect("minority present");
        let codec = codec_for(&down, &cfg.codec)?;
        let mut notes = Vec::new();
        if counts[&minor] < 5 {
            notes.push(format!("only {} minority rows to fine-tune on", counts[&minor]));
        }
        let classes = down.class_values();
        let reference_model = fit(&cfg.backbone, &down, &classes, &mut notes)?;
        let reference = evaluate(reference_model.as_ref(), &test, MetricKind::Auc, Some(&minor))?;
        let model = finetuned(source, cfg, &codec, &down, seed)?;
        let template = PromptTemplate::Fixed(Prompt::one_pair(label, minority_cell));
        let (synth, report) = if need == 0 {
            (down.empty_like(), SamplingReport::default())
        } else {
            synthesize(&model, cfg, &codec, &down, &template, need, seed, &mut notes)?
        };
        let balanced = down.concat(&synth)?;
        let m = fit(&cfg.backbone, &balanced, &classes, &mut notes)?;
        let value = evaluate(m.as_ref(), &test, MetricKind::Auc, Some(&minor))?;
        let after = balanced.class_counts();
        let details = BTreeMap::from([
            ("majority_rows".to_string(), after.get(&major).copied().unwrap_or(0) as f64),
            ("minority_rows".to_string(), after.get(&minor).copied().unwrap_or(0) as f64),
            ("minority_before".to_string(), counts[&minor] as f64),
        ]);
        Ok(ArmRecord {
            scenario: ScenarioKind::Imbalance,
            arm: "balanced".into(),
            seed,
            metric: MetricKind::Auc,
            reference,
            value,
            gap: reference - value,
            train_rows: down.len(),
            synthetic_rows: synth.len(),
            sampling: Some((&report).into()),
            details,
            notes,
        })
    })
    .map_err(|e| e.context("imbalance scenario"))?;
    Ok(ScenarioReport {
        provenance: provenance(ScenarioKind::Imbalance, table, cfg, checkpoint_map("balanced", source)?),
        records,
    })
}

/// The privacy protocol under the full pipeline and each requested toggle.
/// `pretrain_tables` feed a separate pre-training per codec variant;
/// without them every arm starts from scratch.
pub fn run_ablation(
    table: &Table,
    cfg: &PipelineConfig,
    pretrain_tables: &[Table],
    arms: &[&str],
) -> Result<ScenarioReport> {
    cfg.validate()?;
    let mut plan: Vec<(String, Toggles)> = vec![("full".into(), Toggles::default())];
    for a in arms {
        plan.push((a.to_string(), Toggles::single(a)?));
    }
    let mut records = Vec::new();
    let mut checkpoints = BTreeMap::new();
    for (arm, toggles) in &plan {
        let source = if toggles.no_pretrain || pretrain_tables.is_empty() {
            ModelSource::Fresh
        } else {
            ModelSource::Pretrained(pretrain_backend(
                &cfg.backend,
                &toggles.codec(&cfg.codec),
                pretrain_tables,
                cfg.pretrain_epochs,
                cfg.pretrain_copies,
                cfg.pretrain_seed,
            )?)
        };
        if let Some(h) = source.checkpoint_sha256()? {
            checkpoints.insert(arm.clone(), h);
        }
        let mut rs = run_seeds(cfg, |s| privacy_seed(table, cfg, &source, *toggles, arm, s))
            .map_err(|e| e.context(format!("ablation arm {arm}")))?;
        for r in &mut rs {
            r.scenario = ScenarioKind::Ablation;
        }
        records.extend(rs);
    }
    Ok(ScenarioReport {
        provenance: provenance(ScenarioKind::Ablation, table, cfg, checkpoints),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{desk_pipeline, desk_siblings, desk_table};

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            seeds: vec![1, 2],
            ..desk_pipeline()
        }
    }

    fn pretrained(cfg: &PipelineConfig) -> ModelSource {
        let sib = desk_siblings(2, 200, 9).unwrap();
        ModelSource::Pretrained(
            pretrain_backend(&cfg.backend, &cfg.codec, &sib, 1, 1, 0).unwrap(),
        )
    }

    #[test]
    fn privacy_report_shape() {
        let t = desk_table(300, 3).unwrap();
        let cfg = small_cfg();
        let r = run_privacy(&t, &cfg, &pretrained(&cfg)).unwrap();
        assert_eq!(r.records.len(), 2);
        for rec in &r.records {
            assert_eq!(rec.synthetic_rows, rec.train_rows);
            assert_eq!(rec.gap, rec.reference - rec.value);
        }
        let s = r.summary();
        assert_eq!(s.len(), 1);
        let (m, sd) = mean_std(&[r.records[0].value, r.records[1].value]);
        assert_eq!((s[0].mean, s[0].std), (m, sd));
        assert_eq!(r.to_jsonl().unwrap().lines().count(), 3);
        assert!(r.summary_table().contains("synthetic"));
    }

    #[test]
    fn seed_rows_are_reproducible() {
        let t = desk_table(200, 4).unwrap();
        let cfg = PipelineConfig {
            seeds: vec![5],
            ..desk_pipeline()
        };
        let a = run_privacy(&t, &cfg, &ModelSource::Fresh).unwrap();
        let b = run_privacy(&t, &cfg, &ModelSource::Fresh).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let two = PipelineConfig {
            seeds: vec![7, 5],
            ..desk_pipeline()
        };
        let c = run_privacy(&t, &two, &ModelSource::Fresh).unwrap();
        assert_eq!(c.records[1], a.records[0]);
    }

    #[test]
    fn imbalance_reaches_parity_with_minority_rows() {
        let t = desk_table(400, 5).unwrap();
        let cfg = PipelineConfig {
            seeds: vec![1],
            imbalance_ratio: 10,
            ..desk_pipeline()
        };
        let r = run_imbalance(&t, &cfg, &ModelSource::Fresh).unwrap();
        let rec = &r.records[0];
        assert_eq!(rec.details["majority_rows"], rec.details["minority_rows"]);
        assert_eq!(rec.metric, MetricKind::Auc);
    }

    #[test]
    fn imputation_preserves_observed_cells() {
        let t = desk_table(200, 6).unwrap();
        let mut cfg = small_cfg();
        cfg.seeds = vec![1];
        let r = run_imputation(&t, &cfg, &ModelSource::Fresh).unwrap();
        let rec = &r.records[0];
        assert_eq!(rec.details["altered_observed"], 0.0);
        assert_eq!(rec.details["missing_after"], 0.0);
        assert!(rec.details["masked_cells"] > 0.0);
        cfg.missingness.mechanism = Mechanism::Mar;
        let r = run_imputation(&t, &cfg, &ModelSource::Fresh).unwrap();
        assert_eq!(r.records[0].arm, "imputed-mar");
    }

    #[test]
    fn low_resource_with_shrunk_train() {
        let t = desk_table(300, 7).unwrap();
        let cfg = PipelineConfig {
            seeds: vec![1],
            low_resource_rows: Some(40),
            ..desk_pipeline()
        };
        let r = run_low_resource(&t, &cfg, &ModelSource::Fresh).unwrap();
        assert_eq!(r.records[0].train_rows, 40);
    }

    #[test]
    fn ablation_full_arm_matches_privacy() {
        let t = desk_table(200, 8).unwrap();
        let cfg = PipelineConfig {
            seeds: vec![1],
            ..desk_pipeline()
        };
        let sib = desk_siblings(2, 100, 9).unwrap();
        let ab = run_ablation(&t, &cfg, &sib, &Toggles::ARMS).unwrap();
        assert_eq!(ab.summary().len(), 5);
        let src = ModelSource::Pretrained(
            pretrain_backend(&cfg.backend, &cfg.codec, &sib, cfg.pretrain_epochs, cfg.pretrain_copies, 0)
                .unwrap(),
        );
        let p = run_privacy(&t, &cfg, &src).unwrap();
        assert_eq!(ab.records[0].value, p.records[0].value);
        assert_eq!(ab.records[0].reference, p.records[0].reference);
    }
}
