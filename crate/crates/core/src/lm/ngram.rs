//! Add-k smoothed n-gram model with backoff.
//!
//! For a history `h` (the last `order - 1` tokens) the model uses the longest
//! suffix `h'` of `h` that has been observed with non-zero mass and returns
//!
//! ```text
//! p(w | h) = (c(h', w) + k) / (C(h') + k |V|)
//! ```
//!
//! When no suffix was observed (untrained model) the distribution is uniform.
//! Counts are real-valued: fine-tuning rescales everything accumulated so far
//! by `1 / finetune_weight` before adding the downstream counts, so the
//! downstream data weighs `finetune_weight` times as much as what came before.
//!
//! Contexts live in a tree over reversed histories: node 0 is the empty
//! context and the child of node `n` via token `t` is `t` followed by the
//! context of `n`. Backoff is then a single walk from the root.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::vocab::{Corpus, TokenId, Vocabulary};
use super::GenerativeBackend;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgramConfig {
    pub order: usize,
    pub add_k: f64,
    /// Weight of fine-tuning counts relative to everything seen before.
    pub finetune_weight: f64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig {
            order: 6,
            add_k: 0.01,
            finetune_weight: 1e3,
        }
    }
}

impl NgramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if !(self.add_k >= 0.0 && self.add_k.is_finite()) {
            return Err(Error::Config(format!("add_k {} must be >= 0", self.add_k)));
        }
        if !(self.finetune_weight > 0.0 && self.finetune_weight.is_finite()) {
            return Err(Error::Config(format!(
                "finetune_weight {} must be positive",
                self.finetune_weight
            )));
        }
        Ok(())
    }
}

/// Count storage in insertion order, so serialization needs no sorting.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ContextTree {
    /// `(parent, prepended token)` of every node but the root.
    pub(crate) links: Vec<(u32, TokenId)>,
    pub(crate) totals: Vec<f64>,
    /// `(node, next token)` of every stored count.
    pub(crate) next_keys: Vec<(u32, TokenId)>,
    pub(crate) next_vals: Vec<f64>,
    children: FxHashMap<(u32, TokenId), u32>,
    next_index: FxHashMap<(u32, TokenId), u32>,
}

impl Default for ContextTree {
    fn default() -> Self {
        ContextTree {
            links: Vec::new(),
            totals: vec![0.0],
            next_keys: Vec::new(),
            next_vals: Vec::new(),
            children: FxHashMap::default(),
            next_index: FxHashMap::default(),
        }
    }
}

impl ContextTree {
    /// Rebuilds the lookup maps; `links[i]` describes node `i + 1` and must
    /// point to an earlier node.
    pub(crate) fn from_parts(
        links: Vec<(u32, TokenId)>,
        totals: Vec<f64>,
        next_keys: Vec<(u32, TokenId)>,
        next_vals: Vec<f64>,
    ) -> Result<Self> {
        if totals.len() != links.len() + 1 || next_keys.len() != next_vals.len() {
            return Err(Error::Checkpoint("context tree sizes disagree".into()));
        }
        let mut children = FxHashMap::default();
        for (i, &(parent, t)) in links.iter().enumerate() {
            if parent as usize > i || children.insert((parent, t), i as u32 + 1).is_some() {
                return Err(Error::Checkpoint("malformed context tree".into()));
            }
        }
        let mut next_index = FxHashMap::default();
        for (i, &(node, t)) in next_keys.iter().enumerate() {
            if node as usize >= totals.len() || next_index.insert((node, t), i as u32).is_some() {
                return Err(Error::Checkpoint("malformed context counts".into()));
            }
        }
        Ok(ContextTree {
            links,
            totals,
            next_keys,
            next_vals,
            children,
            next_index,
        })
    }

    fn child_or_insert(&mut self, node: u32, token: TokenId) -> u32 {
        let fresh = self.totals.len() as u32;
        let id = *self.children.entry((node, token)).or_insert(fresh);
        if id == fresh {
            self.links.push((node, token));
            self.totals.push(0.0);
        }
        id
    }

    fn add(&mut self, node: u32, target: TokenId, weight: f64) {
        self.totals[node as usize] += weight;
        let fresh = self.next_vals.len() as u32;
        let i = *self.next_index.entry((node, target)).or_insert(fresh);
        if i == fresh {
            self.next_keys.push((node, target));
            self.next_vals.push(0.0);
        }
        self.next_vals[i as usize] += weight;
    }

    fn node(&self, context: &[TokenId]) -> Option<u32> {
        context
            .iter()
            .rev()
            .try_fold(0u32, |n, &t| self.children.get(&(n, t)).copied())
    }

    fn next(&self, node: u32, token: TokenId) -> f64 {
        self.next_index
            .get(&(node, token))
            .map_or(0.0, |&i| self.next_vals[i as usize])
    }

    pub(crate) fn len(&self) -> usize {
        self.totals.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    config: NgramConfig,
    vocab: Vocabulary,
    pub(crate) tree: ContextTree,
}

impl NgramModel {
    pub fn new(config: NgramConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        Ok(NgramModel {
            config,
            vocab,
            tree: ContextTree::default(),
        })
    }

    pub(crate) fn from_parts(config: NgramConfig, vocab: Vocabulary, tree: ContextTree) -> Self {
        NgramModel {
            config,
            vocab,
            tree,
        }
    }

    pub fn config(&self) -> &NgramConfig {
        &self.config
    }

    pub(crate) fn vocab_mut(&mut self) -> &mut Vocabulary {
        &mut self.vocab
    }

    /// Number of stored contexts, the empty one included.
    pub fn context_count(&self) -> usize {
        self.tree.len()
    }

    /// Accumulates counts of every sequence with weight 1.
    pub fn pretrain(&mut self, corpus: &Corpus) -> Result<()> {
        corpus.validate(self.vocab.len())?;
        self.accumulate(corpus, 1.0);
        Ok(())
    }

    /// Down-weights existing counts by `1 / finetune_weight`, then adds the
    /// downstream counts with weight 1.
    pub fn finetune(&mut self, corpus: &Corpus) -> Result<()> {
        corpus.validate(self.vocab.len())?;
        let scale = 1.0 / self.config.finetune_weight;
        if scale != 1.0 {
            self.tree.totals.iter_mut().for_each(|v| *v *= scale);
            self.tree.next_vals.iter_mut().for_each(|v| *v *= scale);
        }
        self.accumulate(corpus, 1.0);
        Ok(())
    }

    fn accumulate(&mut self, corpus: &Corpus, weight: f64) {
        let max_ctx = self.config.order - 1;
        for seq in &corpus.sequences {
            let ids = seq.ids();
            for i in 1..ids.len() {
                let target = ids[i];
                let mut node = 0;
                self.tree.add(node, target, weight);
                for len in 1..=max_ctx.min(i) {
                    node = self.tree.child_or_insert(node, ids[i - len]);
                    self.tree.add(node, target, weight);
                }
            }
        }
    }

    /// Weighted count of `target` after exactly `context` (no backoff).
    pub fn count(&self, context: &[TokenId], target: TokenId) -> f64 {
        self.tree.node(context).map_or(0.0, |n| self.tree.next(n, target))
    }

    pub fn context_total(&self, context: &[TokenId]) -> f64 {
        self.tree
            .node(context)
            .map_or(0.0, |n| self.tree.totals[n as usize])
    }

    /// Longest observed suffix of the history and its node.
    fn backoff_node(&self, context: &[TokenId]) -> Option<(usize, u32)> {
        if self.tree.totals[0] <= 0.0 {
            return None;
        }
        let max = (self.config.order - 1).min(context.len());
        let mut node = 0;
        let mut depth = 0;
        for &t in context.iter().rev().take(max) {
            match self.tree.children.get(&(node, t)) {
                Some(&c) if self.tree.totals[c as usize] > 0.0 => {
                    node = c;
                    depth += 1;
                }
                _ => break,
            }
        }
        Some((depth, node))
    }

    /// The history suffix actually used for `context` after backoff.
    pub fn backoff_context<'c>(&self, context: &'c [TokenId]) -> Option<&'c [TokenId]> {
        self.backoff_node(context)
            .map(|(depth, _)| &context[context.len() - depth..])
    }
}

impl GenerativeBackend for NgramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab.len();
        let Some((_, node)) = self.backoff_node(context) else {
            return vec![1.0 / v as f64; v];
        };
        let k = self.config.add_k;
        let denom = self.tree.totals[node as usize] + k * v as f64;
        (0..v as TokenId)
            .map(|w| (self.tree.next(node, w) + k) / denom)
            .collect()
    }
}
