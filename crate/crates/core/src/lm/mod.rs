//! Language-model backends over serialized rows.

pub mod checkpoint;
pub mod neural;
pub mod ngram;
pub mod plugin;
pub mod vocab;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::TextCodec;
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::table::Table;

pub use neural::{neural_gradient_check, GradCheck, NeuralConfig, TinyNeuralLM, Transformer};
pub use ngram::{NgramConfig, NgramModel};
pub use vocab::{
    detokenize, tokenize, Corpus, TokenId, TokenSequence, Vocabulary, BOS_ID, EOS_ID, IS_ID,
    SEP_ID, UNK_ID,
};

/// An autoregressive model exposing `p(w_k | w_<k)` over its vocabulary.
pub trait GenerativeBackend: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Probability of every vocabulary token following `context`.
    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64>;

    /// `Σ_k log p(w_k | w_<k)` over every token after the first.
    fn sequence_logprob(&self, seq: &TokenSequence) -> f64 {
        chain_logprob(self, seq)
    }

    /// Draws up to `max_new` tokens after `prefix`, stopping after `EOS`.
    fn sample_continuation(
        &self,
        prefix: &[TokenId],
        max_new: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Vec<TokenId> {
        let mask = SamplingMask::default();
        let mut ctx = prefix.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new {
            let mut p = self.next_distribution(&ctx);
            let next = sample_index(&mut p, temperature, &mask, rng);
            out.push(next);
            ctx.push(next);
            if next == EOS_ID {
                break;
            }
        }
        out
    }
}

pub(crate) fn chain_logprob<B: GenerativeBackend + ?Sized>(backend: &B, seq: &TokenSequence) -> f64 {
    let ids = seq.ids();
    (1..ids.len())
        .map(|k| backend.next_distribution(&ids[..k])[ids[k] as usize].ln())
        .sum()
}

/// Tokens that are never produced during sampling.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    pub blocked: Vec<TokenId>,
}

impl Default for SamplingMask {
    fn default() -> Self {
        SamplingMask {
            blocked: vec![vocab::BOS_ID, UNK_ID],
        }
    }
}

/// Samples from `probs` raised to `1 / temperature` (renormalized) after
/// zeroing the masked ids. Falls back to `EOS` if no mass remains.
pub fn sample_index(probs: &mut [f64], temperature: f64, mask: &SamplingMask, rng: &mut Rng) -> TokenId {
    for &b in &mask.blocked {
        if let Some(p) = probs.get_mut(b as usize) {
            *p = 0.0;
        }
    }
    if temperature != 1.0 {
        let max = probs.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            let inv = 1.0 / temperature;
            for p in probs.iter_mut() {
                *p = (*p / max).powf(inv);
            }
        }
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return EOS_ID;
    }
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = EOS_ID;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i as TokenId;
            if r < acc {
                return last;
            }
        }
    }
    last
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Ngram,
    Neural,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Ngram => "ngram",
            BackendKind::Neural => "neural",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub ngram: NgramConfig,
    pub neural: NeuralConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Ngram,
            ngram: NgramConfig::default(),
            neural: NeuralConfig::default(),
        }
    }
}

/// One of the built-in models.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Ngram(NgramModel),
    Neural(TinyNeuralLM),
}

impl Backend {
    pub fn fresh(cfg: &BackendConfig, vocab: Vocabulary, seed: u64) -> Result<Backend> {
        Ok(match cfg.kind {
            BackendKind::Ngram => Backend::Ngram(NgramModel::new(cfg.ngram.clone(), vocab)?),
            BackendKind::Neural => {
                Backend::Neural(TinyNeuralLM::new(cfg.neural.clone(), vocab, seed)?)
            }
        })
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Ngram(_) => BackendKind::Ngram,
            Backend::Neural(_) => BackendKind::Neural,
        }
    }

    /// How tokens unseen at vocabulary-build time are handled.
    pub fn unk_policy(&self) -> &'static str {
        match self {
            Backend::Ngram(_) => "append",
            Backend::Neural(_) => "map_to_unk",
        }
    }

    /// Tokenizes `sentences` into a corpus. The n-gram appends unseen tokens
    /// to its vocabulary; the neural model maps them to `UNK`.
    pub fn encode(&mut self, sentences: &[String], source: &str, separator: &str) -> Corpus {
        if let Backend::Ngram(m) = self {
            let fresh: Vec<String> = sentences
                .iter()
                .flat_map(|s| tokenize(s, separator))
                .collect();
            m.vocab_mut().extend(fresh);
        }
        let vocab = self.vocab();
        let mut corpus = Corpus::default();
        for s in sentences {
            corpus.push(vocab.encode_sentence(s, separator), source);
        }
        corpus
    }

    /// Pre-training. The n-gram makes one counting pass (epochs ignored);
    /// the neural model runs `epochs` passes and returns the epoch-mean NLL.
    pub fn pretrain(&mut self, corpus: &Corpus, epochs: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            Backend::Ngram(m) => m.pretrain(corpus).map(|_| Vec::new()),
            Backend::Neural(m) => m.train_epochs(corpus, epochs, seed),
        }
    }

    /// Neural pre-training with a corpus rebuilt for every epoch, e.g. to
    /// draw fresh feature permutations each pass.
    pub fn pretrain_with(
        &mut self,
        epochs: usize,
        seed: u64,
        mut corpus_for_epoch: impl FnMut(usize, &mut Backend) -> Result<Corpus>,
    ) -> Result<Vec<f64>> {
        if let Backend::Ngram(_) = self {
            let corpus = corpus_for_epoch(0, self)?;
            return self.pretrain(&corpus, epochs, seed);
        }
        let mut trace = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let corpus = corpus_for_epoch(e, self)?;
            let Backend::Neural(m) = self else { unreachable!() };
            trace.extend(m.train_epochs(&corpus, 1, rng::derive(seed, e as u64))?);
        }
        Ok(trace)
    }

    /// Fine-tuning on a downstream corpus. `steps == 0` leaves the model
    /// untouched; otherwise the n-gram adds the downstream counts with
    /// weight `finetune_weight` and the neural model takes `steps` updates.
    pub fn finetune(&mut self, corpus: &Corpus, steps: usize, seed: u64) -> Result<Vec<f64>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        match self {
            Backend::Ngram(m) => m.finetune(corpus).map(|_| Vec::new()),
            Backend::Neural(m) => m.train_steps(corpus, steps, seed),
        }
    }

    pub fn as_generative(&self) -> &dyn GenerativeBackend {
        match self {
            Backend::Ngram(m) => m,
            Backend::Neural(m) => m,
        }
    }
}

impl GenerativeBackend for Backend {
    fn vocab(&self) -> &Vocabulary {
        self.as_generative().vocab()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        self.as_generative().next_distribution(context)
    }

    fn sequence_logprob(&self, seq: &TokenSequence) -> f64 {
        self.as_generative().sequence_logprob(seq)
    }

    fn sample_continuation(
        &self,
        prefix: &[TokenId],
        max_new: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Vec<TokenId> {
        self.as_generative()
            .sample_continuation(prefix, max_new, temperature, rng)
    }
}

/// Serializes every row of `table` `copies` times, each with its own random
/// feature order derived from `(seed, row, copy)`.
pub fn table_sentences(codec: &TextCodec, table: &Table, copies: usize, seed: u64) -> Vec<String> {
    let base = rng::derive(seed, streams::CORPUS);
    let mut out = Vec::with_capacity(table.len() * copies);
    for (i, row) in table.rows.iter().enumerate() {
        for c in 0..copies {
            let s = rng::derive(base, (i * copies + c) as u64);
            let text = codec.encode_row_shuffled(row, s);
            if !text.is_empty() {
                out.push(text);
            }
        }
    }
    out
}

/// Checks that `temperature` and the token budget make sense.
pub(crate) fn check_sampling_args(temperature: f64, max_tokens: usize) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if max_tokens == 0 {
        return Err(Error::InvalidArgument("max_tokens must be positive".into()));
    }
    Ok(())
}
