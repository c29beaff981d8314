//! Self-describing model files.
//!
//! ```text
//! TABSYNTH-CHECKPOINT
//! format_version: 1
//! backend: ngram | neural
//! unk_policy: append | map_to_unk
//! config: <json>
//! vocab: <json array of tokens in id order>
//! end_header
//! <little-endian payload>
//! ```
//!
//! The n-gram payload lists contexts in sorted order, so identical models
//! always produce identical bytes. The neural payload holds parameters, both
//! Adam moment vectors, and the step counter.

use std::collections::HashMap;
use std::path::Path;

use super::neural::{AdamState, NeuralConfig, TinyNeuralLM, Transformer};
use super::ngram::{ContextTree, NgramConfig, NgramModel};
use super::vocab::{TokenId, Vocabulary};
use super::{Backend, GenerativeBackend};
use crate::error::{Error, Result, ResultExt};
use crate::fsutil;

pub const MAGIC: &str = "TABSYNTH-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end_header\n";

pub fn to_bytes(backend: &Backend) -> Result<Vec<u8>> {
    let (config, payload) = match backend {
        Backend::Ngram(m) => (to_json(m.config())?, ngram_payload(m)),
        Backend::Neural(m) => (to_json(m.config())?, neural_payload(m)),
    };
    let vocab = serde_json::to_string(backend.vocab().tokens())
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = format!(
        "{MAGIC}\nformat_version: {FORMAT_VERSION}\nbackend: {}\nunk_policy: {}\nconfig: {config}\nvocab: {vocab}\n{END}",
        backend.kind().name(),
        backend.unk_policy()
    )
    .into_bytes();
    out.extend(payload);
    Ok(out)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes the checkpoint atomically and returns its SHA-256.
pub fn save(backend: &Backend, path: impl AsRef<Path>) -> Result<String> {
    let bytes = to_bytes(backend)?;
    fsutil::write_atomic(path, &bytes)?;
    Ok(fsutil::sha256_hex(&bytes))
}

pub fn load(path: impl AsRef<Path>) -> Result<Backend> {
    let path = path.as_ref();
    from_bytes(&fsutil::read(path)?).context(|| format!("loading {}", path.display()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Backend> {
    let end = find(bytes, END.as_bytes())
        .ok_or_else(|| Error::Checkpoint("missing end_header line".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let payload = &bytes[end + END.len()..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("not a tabsynth checkpoint".into()));
    }
    let mut fields = HashMap::new();
    for line in lines {
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line `{line}`")))?;
        fields.insert(k, v);
    }
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")))
    };
    let version = field("format_version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let tokens: Vec<String> =
        serde_json::from_str(field("vocab")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let vocab = Vocabulary::from_ordered(tokens)?;
    let config = field("config")?;
    let mut r = Reader { buf: payload, at: 0 };
    let backend = match field("backend")? {
        "ngram" => {
            let cfg: NgramConfig =
                serde_json::from_str(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
            cfg.validate()?;
            Backend::Ngram(read_ngram(cfg, vocab, &mut r)?)
        }
        "neural" => {
            let cfg: NeuralConfig =
                serde_json::from_str(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
            cfg.validate()?;
            Backend::Neural(read_neural(cfg, vocab, &mut r)?)
        }
        other => return Err(Error::Checkpoint(format!("unknown backend `{other}`"))),
    };
    if r.at != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(backend)
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn ngram_payload(m: &NgramModel) -> Vec<u8> {
    let t = &m.tree;
    let mut out = Vec::new();
    put_u64(&mut out, t.links.len() as u64);
    for &(parent, token) in &t.links {
        out.extend_from_slice(&parent.to_le_bytes());
        out.extend_from_slice(&token.to_le_bytes());
    }
    put_f64s(&mut out, &t.totals);
    put_u64(&mut out, t.next_keys.len() as u64);
    for &(node, token) in &t.next_keys {
        out.extend_from_slice(&node.to_le_bytes());
        out.extend_from_slice(&token.to_le_bytes());
    }
    put_f64s(&mut out, &t.next_vals);
    out
}

fn neural_payload(m: &TinyNeuralLM) -> Vec<u8> {
    let mut out = Vec::new();
    put_f64s(&mut out, m.network().params());
    put_f64s(&mut out, &m.adam.m);
    put_f64s(&mut out, &m.adam.v);
    put_u64(&mut out, m.adam.step);
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.at + N;
        let slice = self
            .buf
            .get(self.at..end)
            .ok_or_else(|| Error::Checkpoint("payload truncated".into()))?;
        self.at = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    /// A length prefix, rejected if it could not possibly fit the rest.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(unit) > self.buf.len() - self.at {
            return Err(Error::Checkpoint("length prefix exceeds payload".into()));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn read_ngram(cfg: NgramConfig, vocab: Vocabulary, r: &mut Reader) -> Result<NgramModel> {
    let v = vocab.len() as TokenId;
    let check = |id: TokenId| {
        if id < v {
            Ok(id)
        } else {
            Err(Error::Checkpoint(format!("token id {id} outside vocabulary")))
        }
    };
    let pairs = |r: &mut Reader| -> Result<Vec<(u32, TokenId)>> {
        let n = r.len(8)?;
        (0..n).map(|_| Ok((r.u32()?, check(r.u32()?)?))).collect()
    };
    let links = pairs(r)?;
    let totals = r.f64s()?;
    let next_keys = pairs(r)?;
    let next_vals = r.f64s()?;
    let tree = ContextTree::from_parts(links, totals, next_keys, next_vals)?;
    Ok(NgramModel::from_parts(cfg, vocab, tree))
}

fn read_neural(cfg: NeuralConfig, vocab: Vocabulary, r: &mut Reader) -> Result<TinyNeuralLM> {
    let params = r.f64s()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    let step = r.u64()?;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Checkpoint("optimizer state size mismatch".into()));
    }
    let net = Transformer::from_params(&cfg, vocab.len(), params)?;
    Ok(TinyNeuralLM::from_parts(cfg, vocab, net, AdamState { m, v, step }))
}
