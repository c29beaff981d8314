use std::collections::{BTreeSet, HashMap};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = ",";
pub const IS: &str = "is";
pub const UNK: &str = "<unk>";

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const SEP_ID: TokenId = 2;
pub const IS_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;

const SPECIALS: [&str; 5] = [BOS, EOS, SEP, IS, UNK];

/// Dense token ids: the five specials first, then the remaining tokens in
/// lexicographic order. Extending appends (sorted) at the end so existing
/// ids never move.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        v.extend(tokens);
        v
    }

    /// Rebuilds a vocabulary from its exact id order (as stored in a
    /// checkpoint). The specials must come first.
    pub fn from_ordered(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Checkpoint(
                "vocabulary does not start with the special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Vocabulary over the whitespace/separator tokens of `sentences`.
    pub fn build(sentences: &[String], cfg: &CodecConfig) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot build a vocabulary from zero sentences".into(),
            ));
        }
        let sep = cfg.clause_separator.as_str();
        let mut set = BTreeSet::new();
        for s in sentences {
            for t in tokenize(s, sep) {
                set.insert(t);
            }
        }
        Ok(Vocabulary::from_tokens(set))
    }

    /// Adds tokens not yet present; returns how many were added.
    pub fn extend<I, S>(&mut self, tokens: I) -> usize
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let fresh: BTreeSet<String> = tokens
            .into_iter()
            .filter(|t| !self.index.contains_key(t.as_ref()))
            .map(|t| t.as_ref().to_string())
            .collect();
        let n = fresh.len();
        for t in fresh {
            self.push(&t);
        }
        n
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len() as TokenId);
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `BOS t1 .. tn EOS`, unknown tokens mapped to `UNK`.
    pub fn encode_sentence(&self, text: &str, separator: &str) -> TokenSequence {
        let mut ids = vec![BOS_ID];
        ids.extend(tokenize(text, separator).iter().map(|t| self.id_or_unk(t)));
        ids.push(EOS_ID);
        TokenSequence(ids)
    }

    /// `BOS t1 .. tn` (no EOS), for prompting.
    pub fn encode_prompt(&self, text: &str, separator: &str) -> Vec<TokenId> {
        let mut ids = vec![BOS_ID];
        ids.extend(tokenize(text, separator).iter().map(|t| self.id_or_unk(t)));
        ids
    }

    /// Inverse of [`tokenize`] for the tokens between `BOS` and `EOS`.
    pub fn decode(&self, ids: &[TokenId], separator: &str) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != BOS_ID && i != EOS_ID)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&toks, separator)
    }
}

/// Whitespace tokenization where each occurrence of the clause separator
/// becomes the `,` token.
pub fn tokenize(text: &str, separator: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, piece) in text.split(separator).enumerate() {
        if i > 0 {
            out.push(SEP.to_string());
        }
        out.extend(piece.split_whitespace().map(str::to_string));
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S], separator: &str) -> String {
    let mut out = String::new();
    let mut after_sep = true;
    for t in tokens {
        let t = t.as_ref();
        if t == SEP {
            out.push_str(separator);
            after_sep = true;
        } else {
            if !after_sep {
                out.push(' ');
            }
            out.push_str(t);
            after_sep = false;
        }
    }
    out
}

/// Token ids of one sentence, `BOS`-first and `EOS`-terminated when complete.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<TokenSequence>,
    /// Source table id of each sequence.
    pub provenance: Vec<String>,
}

impl Corpus {
    pub fn push(&mut self, seq: TokenSequence, source: &str) {
        self.sequences.push(seq);
        self.provenance.push(source.to_string());
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn append(&mut self, other: Corpus) {
        self.sequences.extend(other.sequences);
        self.provenance.extend(other.provenance);
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Number of distinct source tables.
    pub fn source_count(&self) -> usize {
        self.provenance.iter().collect::<BTreeSet<_>>().len()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len().saturating_sub(1)).sum()
    }

    /// Fails if any id is outside `0..vocab_size` or a sequence is too short.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Model("corpus is empty".into()));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.len() < 2 {
                return Err(Error::Model(format!("sequence {i} has fewer than 2 tokens")));
            }
            if let Some(&bad) = s.0.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::Model(format!(
                    "sequence {i} contains id {bad} outside vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}
