//! One function per subcommand. Every output is computed in full before the
//! first file is written, and every file is written atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use tabsynth::backbone::label_synthetic;
use tabsynth::codec::TextCodec;
use tabsynth::fsutil::{read, sha256_hex, write_atomic};
use tabsynth::lm::plugin::PluginLm;
use tabsynth::lm::{checkpoint, table_sentences, Backend, Vocabulary};
use tabsynth::rng::{self, streams};
use tabsynth::sampler::{
    impute_rows, sample_table, Generator, Prompt, PromptTemplate, SampleContext, SamplingConfig,
    ValueSets,
};
use tabsynth::scenarios::{
    pretrain_backend, run_ablation, run_imbalance, run_imputation, run_low_resource, run_privacy,
    ModelSource, ScenarioKind, ScenarioReport, Toggles,
};
use tabsynth::table::{binary_classes, load_csv, to_csv_string, Table, Task};
use tabsynth::{Error, Result};

use crate::config::{BackendChoice, Resolved};
use crate::manifest::{hint, load_tables, Loaded, Manifest};

/// Input files, output files, and the resolved configuration of a run.
#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    resolved: &'a Resolved,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    details: serde_json::Value,
}

/// Files to write at the end of a command, in order.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    /// Writes a `<first output>.provenance.json` sidecar after the outputs.
    fn commit(
        mut self,
        command: &str,
        resolved: &Resolved,
        inputs: &[&Path],
        details: serde_json::Value,
    ) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_hex(&read(p)?))))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let outputs = self
            .files
            .iter()
            .map(|(p, b)| (p.display().to_string(), sha256_hex(b)))
            .collect();
        let prov = Provenance {
            command,
            resolved,
            inputs,
            outputs,
            details,
        };
        let first = self.files.first().map(|f| f.0.clone()).expect("at least one output");
        let mut side = first.into_os_string();
        side.push(".provenance.json");
        let text = serde_json::to_string_pretty(&prov).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        self.files.push((PathBuf::from(side), format!("{text}\n").into_bytes()));
        for (p, b) in &self.files {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_atomic(p, b)?;
        }
        Ok(())
    }
}

/// Where a data table comes from on the command line.
pub struct DataArgs<'a> {
    pub path: &'a Path,
    pub label: Option<&'a str>,
    pub task: Option<Task>,
}

impl DataArgs<'_> {
    fn load(&self) -> Result<Table> {
        load_csv(self.path, &hint(self.label, self.task))
    }
}

fn accepted(loaded: &[Loaded]) -> Result<Vec<Table>> {
    for l in loaded {
        match &l.outcome {
            Ok(t) => println!("accepted {}: {} rows", l.path.display(), t.len()),
            Err(why) => println!("rejected {}: {why}", l.path.display()),
        }
    }
    let tables: Vec<Table> = loaded.iter().filter_map(|l| l.outcome.clone().ok()).collect();
    if tables.is_empty() {
        return Err(Error::InvalidArgument("no table passed the column-name filter".into()));
    }
    Ok(tables)
}

pub fn build_corpus(r: &Resolved, manifest_path: &Path, out: &Path, copies: usize) -> Result<()> {
    if copies == 0 {
        return Err(Error::InvalidArgument("--copies must be >= 1".into()));
    }
    let (manifest, base) = Manifest::load(manifest_path)?;
    let loaded = load_tables(&manifest, &base)?;
    let tables = accepted(&loaded)?;
    let codec_cfg = &r.config.pipeline.codec;
    let mut lines = String::new();
    let mut sentences = Vec::new();
    let mut per_table = Vec::new();
    for (k, t) in tables.iter().enumerate() {
        let codec = TextCodec::new(t.schema.clone(), codec_cfg.clone())?;
        let s = table_sentences(&codec, t, copies, rng::derive(r.seed, k as u64));
        for text in &s {
            let line = json!({ "source": t.source_id, "text": text });
            lines.push_str(&line.to_string());
            lines.push('\n');
        }
        per_table.push(json!({ "source": t.source_id, "rows": t.len(), "sentences": s.len() }));
        sentences.extend(s);
    }
    let vocab = Vocabulary::build(&sentences, codec_cfg)?;
    let vocab_json = serde_json::to_string_pretty(vocab.tokens()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rejected: Vec<_> = loaded
        .iter()
        .filter_map(|l| l.outcome.as_ref().err().map(|why| json!({ "path": l.path.display().to_string(), "reason": why })))
        .collect();
    println!("{} sentences, {} tokens in vocabulary", sentences.len(), vocab.len());
    let mut o = Outputs::default();
    o.add(out.join("corpus.jsonl"), lines);
    o.add(out.join("vocab.json"), format!("{vocab_json}\n"));
    let inputs: Vec<&Path> = std::iter::once(manifest_path).chain(loaded.iter().map(|l| l.path.as_path())).collect();
    o.commit(
        "build-corpus",
        r,
        &inputs,
        json!({ "copies": copies, "accepted": per_table, "rejected": rejected }),
    )
}

fn builtin_only(r: &Resolved, what: &str) -> Result<()> {
    match &r.backend {
        BackendChoice::Plugin(_) => Err(Error::InvalidArgument(format!(
            "{what} needs a built-in backend; plugin generators are used as-is"
        ))),
        BackendChoice::Builtin(_) => Ok(()),
    }
}

fn pretrained_from_manifest(r: &Resolved, manifest_path: &Path, epochs: Option<usize>) -> Result<(Backend, Vec<Loaded>)> {
    let p = &r.config.pipeline;
    let (manifest, base) = Manifest::load(manifest_path)?;
    let loaded = load_tables(&manifest, &base)?;
    let tables = accepted(&loaded)?;
    let backend = pretrain_backend(
        &p.backend,
        &p.codec,
        &tables,
        epochs.unwrap_or(p.pretrain_epochs),
        p.pretrain_copies,
        p.pretrain_seed,
    )?;
    Ok((backend, loaded))
}

pub fn pretrain(r: &Resolved, manifest_path: &Path, out: &Path, epochs: Option<usize>) -> Result<()> {
    builtin_only(r, "pretrain")?;
    let (backend, loaded) = pretrained_from_manifest(r, manifest_path, epochs)?;
    let bytes = checkpoint::to_bytes(&backend)?;
    println!("{} checkpoint, {} tokens, sha256 {}", backend.kind().name(), tabsynth::lm::GenerativeBackend::vocab(&backend).len(), sha256_hex(&bytes));
    let mut o = Outputs::default();
    o.add(out, bytes);
    let inputs: Vec<&Path> = std::iter::once(manifest_path).chain(loaded.iter().map(|l| l.path.as_path())).collect();
    o.commit("pretrain", r, &inputs, json!({ "backend": backend.kind().name() }))
}

pub fn finetune(r: &Resolved, ckpt: &Path, data: &DataArgs, out: &Path, steps: Option<usize>) -> Result<()> {
    builtin_only(r, "finetune")?;
    let p = &r.config.pipeline;
    let mut backend = checkpoint::load(ckpt)?;
    let table = data.load()?;
    let codec = TextCodec::new(table.schema.clone(), p.codec.clone())?;
    let sentences = table_sentences(&codec, &table, p.finetune_copies, r.seed);
    let corpus = backend.encode(&sentences, &table.source_id, codec.separator());
    let steps = steps.unwrap_or(p.finetune_steps);
    let trace = backend.finetune(&corpus, steps, rng::derive(r.seed, streams::TRAIN))?;
    let bytes = checkpoint::to_bytes(&backend)?;
    println!("fine-tuned on {} rows ({} sentences), sha256 {}", table.len(), sentences.len(), sha256_hex(&bytes));
    let mut o = Outputs::default();
    o.add(out, bytes);
    o.commit(
        "finetune",
        r,
        &[ckpt, data.path],
        json!({ "steps": steps, "final_loss": trace.last(), "base_checkpoint": sha256_hex(&read(ckpt)?) }),
    )
}

/// A loaded generator: a built-in checkpoint or an external plugin.
enum Model {
    Builtin(Backend),
    Plugin(PluginLm),
}

impl Model {
    fn open(r: &Resolved, ckpt: Option<&Path>) -> Result<Model> {
        match (&r.backend, ckpt) {
            (BackendChoice::Plugin(cmd), _) => Ok(Model::Plugin(PluginLm::spawn(cmd)?)),
            (BackendChoice::Builtin(_), Some(p)) => Ok(Model::Builtin(checkpoint::load(p)?)),
            (BackendChoice::Builtin(_), None) => Err(Error::InvalidArgument(
                "--checkpoint is required unless --backend plugin:<cmd> is given".into(),
            )),
        }
    }

    fn generator(&self) -> &dyn Generator {
        match self {
            Model::Builtin(b) => b,
            Model::Plugin(p) => p,
        }
    }
}

fn sampling(r: &Resolved) -> SamplingConfig {
    SamplingConfig {
        seed: r.seed,
        ..r.config.pipeline.sampling.clone()
    }
}

fn inputs<'a>(ckpt: Option<&'a Path>, data: &'a Path) -> Vec<&'a Path> {
    ckpt.into_iter().chain(std::iter::once(data)).collect()
}

pub fn sample(r: &Resolved, ckpt: Option<&Path>, data: &DataArgs, count: usize, out: &Path) -> Result<()> {
    let p = &r.config.pipeline;
    let model = Model::open(r, ckpt)?;
    let table = data.load()?;
    let codec = TextCodec::new(table.schema.clone(), p.codec.clone())?;
    let sc = sampling(r);
    let values = ValueSets::from_table(&table);
    let ctx = SampleContext {
        generator: model.generator(),
        codec: &codec,
        config: &sc,
        values: Some(&values),
    };
    let template = PromptTemplate::for_strategy(p.strategy, &table)?;
    let (synth, report) = sample_table(&ctx, &template, count)?;
    let labeled = match table.schema.label_index() {
        Some(l) if synth.rows.iter().any(|row| row[l].is_missing()) => {
            let predictor = p.backbone.fit(&table)?;
            label_synthetic(predictor.as_ref(), &synth)?
        }
        _ => synth,
    };
    println!(
        "{} rows accepted in {} attempts (acceptance {:.3})",
        report.accepted, report.attempted, report.acceptance_rate
    );
    let mut o = Outputs::default();
    o.add(out, to_csv_string(&labeled)?);
    o.commit("sample", r, &inputs(ckpt, data.path), json!({ "count": count, "sampling": report }))
}

pub fn impute(r: &Resolved, ckpt: Option<&Path>, data: &DataArgs, out: &Path) -> Result<()> {
    let p = &r.config.pipeline;
    let model = Model::open(r, ckpt)?;
    let table = data.load()?;
    let codec = TextCodec::new(table.schema.clone(), p.codec.clone())?;
    let sc = sampling(r);
    let values = ValueSets::from_table(&table);
    let ctx = SampleContext {
        generator: model.generator(),
        codec: &codec,
        config: &sc,
        values: Some(&values),
    };
    let (done, report) = impute_rows(&ctx, &table, &table)?;
    println!(
        "{} missing cells: {} filled by the model, {} by column fallback",
        report.missing_before, report.model_filled, report.fallback_filled
    );
    let mut o = Outputs::default();
    o.add(out, to_csv_string(&done)?);
    o.commit("impute", r, &inputs(ckpt, data.path), json!({ "imputation": report }))
}

pub fn balance(r: &Resolved, ckpt: Option<&Path>, data: &DataArgs, out: &Path) -> Result<()> {
    let p = &r.config.pipeline;
    let model = Model::open(r, ckpt)?;
    let table = data.load()?;
    let (major, minor) = binary_classes(&table)?;
    let counts = table.class_counts();
    let need = counts[&major] - counts[&minor];
    let label = table.schema.label_index().expect("binary_classes checked the label");
    let minority = table
        .rows
        .iter()
        .map(|row| &row[label])
        .find(|c| c.text() == minor)
        .cloned()
        .expect("minority present");
    let codec = TextCodec::new(table.schema.clone(), p.codec.clone())?;
    let sc = sampling(r);
    let values = ValueSets::from_table(&table);
    let ctx = SampleContext {
        generator: model.generator(),
        codec: &codec,
        config: &sc,
        values: Some(&values),
    };
    let (balanced, report) = if need == 0 {
        (table.clone(), None)
    } else {
        let template = PromptTemplate::Fixed(Prompt::one_pair(label, minority));
        let (synth, report) = sample_table(&ctx, &template, need)?;
        (table.concat(&synth)?, Some(report))
    };
    println!("{major}: {}, {minor}: {} -> {} rows each", counts[&major], counts[&minor], counts[&major]);
    let mut o = Outputs::default();
    o.add(out, to_csv_string(&balanced)?);
    o.commit(
        "balance",
        r,
        &inputs(ckpt, data.path),
        json!({ "majority": major, "minority": minor, "generated": need, "sampling": report }),
    )
}

fn scenario_source(r: &Resolved, ckpt: Option<&Path>, manifest: Option<&Path>) -> Result<(ModelSource, Vec<PathBuf>)> {
    Ok(match (&r.backend, ckpt, manifest) {
        (BackendChoice::Plugin(cmd), _, _) => (ModelSource::Plugin(Arc::new(PluginLm::spawn(cmd)?)), Vec::new()),
        (_, Some(_), Some(_)) => {
            return Err(Error::InvalidArgument("give --checkpoint or --manifest, not both".into()))
        }
        (_, Some(c), None) => (ModelSource::Pretrained(checkpoint::load(c)?), vec![c.to_path_buf()]),
        (_, None, Some(m)) => {
            let (b, loaded) = pretrained_from_manifest(r, m, None)?;
            let files = std::iter::once(m.to_path_buf()).chain(loaded.into_iter().map(|l| l.path)).collect();
            (ModelSource::Pretrained(b), files)
        }
        (_, None, None) => (ModelSource::Fresh, Vec::new()),
    })
}

fn write_report(r: &Resolved, command: &str, report: &ScenarioReport, out: &Path, inputs: &[&Path]) -> Result<()> {
    let table = report.summary_table();
    print!("{table}");
    let mut o = Outputs::default();
    o.add(out, report.to_jsonl()?);
    let mut summary = out.as_os_str().to_owned();
    summary.push(".summary.txt");
    o.add(PathBuf::from(summary), table);
    o.commit(command, r, inputs, json!({ "summary": report.summary() }))
}

pub fn scenario(
    r: &Resolved,
    kind: ScenarioKind,
    data: &DataArgs,
    ckpt: Option<&Path>,
    manifest: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let table = data.load()?;
    let (source, files) = scenario_source(r, ckpt, manifest)?;
    let cfg = &r.config.pipeline;
    let report = match kind {
        ScenarioKind::Privacy => run_privacy(&table, cfg, &source)?,
        ScenarioKind::LowResource => run_low_resource(&table, cfg, &source)?,
        ScenarioKind::Imputation => run_imputation(&table, cfg, &source)?,
        ScenarioKind::Imbalance => run_imbalance(&table, cfg, &source)?,
        ScenarioKind::Ablation => {
            return Err(Error::InvalidArgument("use the ablation command for ablations".into()))
        }
    };
    let inputs: Vec<&Path> = std::iter::once(data.path).chain(files.iter().map(PathBuf::as_path)).collect();
    write_report(r, "scenario", &report, out, &inputs)
}

pub fn ablation(r: &Resolved, data: &DataArgs, manifest: Option<&Path>, toggles: &[String], out: &Path) -> Result<()> {
    builtin_only(r, "ablation")?;
    let table = data.load()?;
    let arms: Vec<&str> = if toggles.is_empty() {
        Toggles::ARMS.to_vec()
    } else {
        toggles.iter().map(String::as_str).collect()
    };
    for a in &arms {
        Toggles::single(a)?;
    }
    let (pretrain_tables, files) = match manifest {
        Some(m) => {
            let (man, base) = Manifest::load(m)?;
            let loaded = load_tables(&man, &base)?;
            let tables = accepted(&loaded)?;
            let files: Vec<PathBuf> = std::iter::once(m.to_path_buf()).chain(loaded.into_iter().map(|l| l.path)).collect();
            (tables, files)
        }
        None => (Vec::new(), Vec::new()),
    };
    let report = run_ablation(&table, &r.config.pipeline, &pretrain_tables, &arms)?;
    let inputs: Vec<&Path> = std::iter::once(data.path).chain(files.iter().map(PathBuf::as_path)).collect();
    write_report(r, "ablation", &report, out, &inputs)
}
