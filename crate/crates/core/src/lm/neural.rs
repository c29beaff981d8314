//! A small decoder-only transformer trained with hand-written backprop.
//!
//! Pre-norm blocks (`x + attn(ln(x))`, `h + mlp(ln(h))`), learned positional
//! embeddings, tanh-GELU MLP, untied output head. All parameters live in one
//! flat `f64` buffer so that the optimizer, checkpointing, and the
//! finite-difference gradient check treat them uniformly.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vocab::{Corpus, TokenId, TokenSequence, Vocabulary, EOS_ID};
use super::{sample_index, GenerativeBackend, SamplingMask};
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuralConfig {
    pub d_model: usize,
    /// Maximum number of input positions; longer sequences are truncated.
    pub context: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub init_std: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            d_model: 64,
            context: 128,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            learning_rate: 3e-4,
            batch_size: 8,
            init_std: 0.02,
            grad_clip: 1.0,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("neural config: {m}")));
        if self.d_model == 0 || self.context == 0 || self.heads == 0 || self.ff_mult == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return bad("learning_rate and batch_size must be positive");
        }
        if !(self.init_std > 0.0) || self.grad_clip < 0.0 {
            return bad("init_std must be positive and grad_clip non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    vocab: usize,
    d: usize,
    ctx: usize,
    ff: usize,
    heads: usize,
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_head: usize,
    b_head: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &NeuralConfig, vocab: usize) -> Layout {
        let d = cfg.d_model;
        let ff = d * cfg.ff_mult;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let wte = take(vocab * d);
        let wpe = take(cfg.context * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * ff),
                b1: take(ff),
                w2: take(ff * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_head = take(d * vocab);
        let b_head = take(vocab);
        Layout {
            vocab,
            d,
            ctx: cfg.context,
            ff,
            heads: cfg.heads,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_head,
            b_head,
            total: at,
        }
    }

    /// Offsets of LayerNorm gains (initialized to 1) and all biases (0).
    fn ones_and_zeros(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let d = self.d;
        let mut ones = vec![(self.lnf_g, d)];
        let mut zeros = vec![(self.lnf_b, d), (self.b_head, self.vocab)];
        for l in &self.layers {
            ones.push((l.ln1_g, d));
            ones.push((l.ln2_g, d));
            for (o, n) in [
                (l.ln1_b, d),
                (l.ln2_b, d),
                (l.bq, d),
                (l.bk, d),
                (l.bv, d),
                (l.bo, d),
                (l.b1, self.ff),
                (l.b2, d),
            ] {
                zeros.push((o, n));
            }
        }
        (ones, zeros)
    }
}

fn linear(x: &[f64], t: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; t * dout];
    for i in 0..t {
        let xi = &x[i * din..(i + 1) * din];
        let yi = &mut y[i * dout..(i + 1) * dout];
        yi.copy_from_slice(&b[..dout]);
        for (k, &a) in xi.iter().enumerate() {
            let wk = &w[k * dout..(k + 1) * dout];
            for (yj, &wj) in yi.iter_mut().zip(wk) {
                *yj += a * wj;
            }
        }
    }
    y
}

/// Accumulates `dw += xᵀ dy`, `db += Σ dy` and returns `dx = dy wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    t: usize,
    din: usize,
    dout: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; t * din];
    for i in 0..t {
        let xi = &x[i * din..(i + 1) * din];
        let dyi = &dy[i * dout..(i + 1) * dout];
        for (dbj, &g) in db[..dout].iter_mut().zip(dyi) {
            *dbj += g;
        }
        let dxi = &mut dx[i * din..(i + 1) * din];
        for k in 0..din {
            let wk = &w[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for (&wj, &g) in wk.iter().zip(dyi) {
                acc += wj * g;
            }
            dxi[k] = acc;
            let a = xi[k];
            let dwk = &mut dw[k * dout..(k + 1) * dout];
            for (dwj, &g) in dwk.iter_mut().zip(dyi) {
                *dwj += a * g;
            }
        }
    }
    dx
}

struct LnOut {
    y: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layernorm(x: &[f64], t: usize, d: usize, g: &[f64], b: &[f64]) -> LnOut {
    let mut y = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut inv_std = vec![0.0; t];
    for i in 0..t {
        let xi = &x[i * d..(i + 1) * d];
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = r;
        for j in 0..d {
            let h = (xi[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    LnOut { y, xhat, inv_std }
}

fn layernorm_backward(
    dy: &[f64],
    ln: &LnOut,
    t: usize,
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let row = i * d..(i + 1) * d;
        let dyi = &dy[row.clone()];
        let xh = &ln.xhat[row.clone()];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
            dxhat[j] = dyi[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = ln.inv_std[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

struct LayerCache {
    ln1: LnOut,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × t × t`, row `i` holds weights over keys `0..=i`.
    att: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnOut,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct ForwardCache {
    t: usize,
    layers: Vec<LayerCache>,
    lnf: LnOut,
    probs: Vec<f64>,
}

/// Network weights plus the forward/backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    layout: Layout,
    params: Vec<f64>,
}

impl Transformer {
    pub fn new(cfg: &NeuralConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let layout = Layout::new(cfg, vocab_size);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = rng::stream(seed, streams::INIT);
        let mut params: Vec<f64> = (0..layout.total).map(|_| normal.sample(&mut rng)).collect();
        let (ones, zeros) = layout.ones_and_zeros();
        for (o, n) in ones {
            params[o..o + n].fill(1.0);
        }
        for (o, n) in zeros {
            params[o..o + n].fill(0.0);
        }
        Ok(Transformer { layout, params })
    }

    pub(crate) fn from_params(cfg: &NeuralConfig, vocab_size: usize, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(cfg, vocab_size);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Transformer { layout, params })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.vocab
    }

    pub fn context(&self) -> usize {
        self.layout.ctx
    }

    /// Offset and length of the output bias inside the parameter buffer.
    pub fn head_bias_range(&self) -> std::ops::Range<usize> {
        self.layout.b_head..self.layout.b_head + self.layout.vocab
    }

    fn p(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    /// Input/target pairs of a sequence after context truncation.
    fn io(&self, seq: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
        let n = (seq.len().saturating_sub(1)).min(self.layout.ctx);
        (seq[..n].to_vec(), seq[1..=n].to_vec())
    }

    fn forward(&self, inputs: &[TokenId]) -> ForwardCache {
        let l = &self.layout;
        let (t, d, ff, nh) = (inputs.len(), l.d, l.ff, l.heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = vec![0.0; t * d];
        for (i, &tok) in inputs.iter().enumerate() {
            let e = self.p(l.wte + tok as usize * d, d);
            let pe = self.p(l.wpe + i * d, d);
            for j in 0..d {
                x[i * d + j] = e[j] + pe[j];
            }
        }
        let mut caches = Vec::with_capacity(l.layers.len());
        for lo in &l.layers {
            let ln1 = layernorm(&x, t, d, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d));
            let q = linear(&ln1.y, t, d, self.p(lo.wq, d * d), self.p(lo.bq, d), d);
            let k = linear(&ln1.y, t, d, self.p(lo.wk, d * d), self.p(lo.bk, d), d);
            let v = linear(&ln1.y, t, d, self.p(lo.wv, d * d), self.p(lo.bv, d), d);
            let mut att = vec![0.0; nh * t * t];
            let mut ctx = vec![0.0; t * d];
            for h in 0..nh {
                let ho = h * dh;
                for i in 0..t {
                    let row = &mut att[(h * t + i) * t..(h * t + i) * t + i + 1];
                    let qi = &q[i * d + ho..i * d + ho + dh];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &k[j * d + ho..j * d + ho + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let ci = &mut ctx[i * d + ho..i * d + ho + dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &v[j * d + ho..j * d + ho + dh];
                        for (c, &vv) in ci.iter_mut().zip(vj) {
                            *c += pij * vv;
                        }
                    }
                }
            }
            let o = linear(&ctx, t, d, self.p(lo.wo, d * d), self.p(lo.bo, d), d);
            let h_res: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let ln2 = layernorm(&h_res, t, d, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d));
            let pre = linear(&ln2.y, t, d, self.p(lo.w1, d * ff), self.p(lo.b1, ff), ff);
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let m = linear(&act, t, ff, self.p(lo.w2, ff * d), self.p(lo.b2, d), d);
            x = h_res.iter().zip(&m).map(|(a, b)| a + b).collect();
            caches.push(LayerCache {
                ln1,
                q,
                k,
                v,
                att,
                ctx,
                ln2,
                pre,
                act,
            });
        }
        let lnf = layernorm(&x, t, d, self.p(l.lnf_g, d), self.p(l.lnf_b, d));
        let mut probs = linear(
            &lnf.y,
            t,
            d,
            self.p(l.w_head, d * l.vocab),
            self.p(l.b_head, l.vocab),
            l.vocab,
        );
        for i in 0..t {
            softmax_in_place(&mut probs[i * l.vocab..(i + 1) * l.vocab]);
        }
        ForwardCache {
            t,
            layers: caches,
            lnf,
            probs,
        }
    }

    /// Summed negative log-likelihood of `seq` (positions after truncation)
    /// and the number of predicted tokens.
    pub fn sequence_nll(&self, seq: &[TokenId]) -> (f64, usize) {
        let (inputs, targets) = self.io(seq);
        if inputs.is_empty() {
            return (0.0, 0);
        }
        let fc = self.forward(&inputs);
        let v = self.layout.vocab;
        let nll = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -fc.probs[i * v + y as usize].ln())
            .sum();
        (nll, targets.len())
    }

    /// Summed NLL of one sequence and its gradient (w.r.t. the sum).
    fn nll_and_grad(&self, seq: &[TokenId]) -> (f64, usize, Vec<f64>) {
        let l = &self.layout;
        let mut grad = vec![0.0; l.total];
        let (inputs, targets) = self.io(seq);
        if inputs.is_empty() {
            return (0.0, 0, grad);
        }
        let fc = self.forward(&inputs);
        let (t, d, ff, nh, vs) = (fc.t, l.d, l.ff, l.heads, l.vocab);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut nll = 0.0;
        let mut dlogits = fc.probs.clone();
        for (i, &y) in targets.iter().enumerate() {
            nll -= fc.probs[i * vs + y as usize].ln();
            dlogits[i * vs + y as usize] -= 1.0;
        }

        let (head_w, rest) = grad[l.w_head..].split_at_mut(d * vs);
        let head_b = &mut rest[..vs];
        let dxf = linear_backward(
            &fc.lnf.y,
            &dlogits,
            t,
            d,
            vs,
            self.p(l.w_head, d * vs),
            head_w,
            head_b,
        );
        let (gf, bf) = grad[l.lnf_g..l.lnf_g + 2 * d].split_at_mut(d);
        let mut dx = layernorm_backward(&dxf, &fc.lnf, t, d, self.p(l.lnf_g, d), gf, bf);

        for (lo, c) in l.layers.iter().zip(&fc.layers).rev() {
            // mlp branch: x = h + W2 gelu(W1 ln2(h))
            let (w2, b2) = split_pair(&mut grad, lo.w2, ff * d, lo.b2, d);
            let dact = linear_backward(&c.act, &dx, t, ff, d, self.p(lo.w2, ff * d), w2, b2);
            let dpre: Vec<f64> = dact
                .iter()
                .zip(&c.pre)
                .map(|(g, &z)| g * gelu_grad(z))
                .collect();
            let (w1, b1) = split_pair(&mut grad, lo.w1, d * ff, lo.b1, ff);
            let dln2 = linear_backward(&c.ln2.y, &dpre, t, d, ff, self.p(lo.w1, d * ff), w1, b1);
            let (g2, bb2) = split_pair(&mut grad, lo.ln2_g, d, lo.ln2_b, d);
            let dh_ln = layernorm_backward(&dln2, &c.ln2, t, d, self.p(lo.ln2_g, d), g2, bb2);
            let dh_res: Vec<f64> = dx.iter().zip(&dh_ln).map(|(a, b)| a + b).collect();

            // attention branch: h = x + Wo attn(q, k, v)
            let (wo, bo) = split_pair(&mut grad, lo.wo, d * d, lo.bo, d);
            let dctx = linear_backward(&c.ctx, &dh_res, t, d, d, self.p(lo.wo, d * d), wo, bo);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut ds = vec![0.0; t];
            for h in 0..nh {
                let ho = h * dh;
                for i in 0..t {
                    let row = &c.att[(h * t + i) * t..(h * t + i) * t + i + 1];
                    let dci = &dctx[i * d + ho..i * d + ho + dh];
                    let mut dot = 0.0;
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &c.v[j * d + ho..j * d + ho + dh];
                        let dp: f64 = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += pij * dp;
                        let dvj = &mut dv[j * d + ho..j * d + ho + dh];
                        for (g, &a) in dvj.iter_mut().zip(dci) {
                            *g += pij * a;
                        }
                    }
                    for (j, &pij) in row.iter().enumerate() {
                        let dsij = pij * (ds[j] - dot) * scale;
                        for e in 0..dh {
                            dq[i * d + ho + e] += dsij * c.k[j * d + ho + e];
                            dk[j * d + ho + e] += dsij * c.q[i * d + ho + e];
                        }
                    }
                }
            }
            let mut dln1 = vec![0.0; t * d];
            for (w_off, b_off, dproj) in [(lo.wq, lo.bq, &dq), (lo.wk, lo.bk, &dk), (lo.wv, lo.bv, &dv)] {
                let (w, b) = split_pair(&mut grad, w_off, d * d, b_off, d);
                let part = linear_backward(&c.ln1.y, dproj, t, d, d, self.p(w_off, d * d), w, b);
                for (a, p) in dln1.iter_mut().zip(part) {
                    *a += p;
                }
            }
            let (g1, bb1) = split_pair(&mut grad, lo.ln1_g, d, lo.ln1_b, d);
            let dx_ln = layernorm_backward(&dln1, &c.ln1, t, d, self.p(lo.ln1_g, d), g1, bb1);
            dx = dh_res.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
        }

        for (i, &tok) in inputs.iter().enumerate() {
            let dxi = &dx[i * d..(i + 1) * d];
            let e = l.wte + tok as usize * d;
            let p = l.wpe + i * d;
            for j in 0..d {
                grad[e + j] += dxi[j];
                grad[p + j] += dxi[j];
            }
        }
        (nll, targets.len(), grad)
    }

    /// Mean per-token NLL over `batch` and its gradient.
    pub fn batch_loss_and_grad(&self, batch: &[TokenSequence]) -> Result<(f64, usize, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        for s in batch {
            if let Some(&bad) = s.0.iter().find(|&&id| id as usize >= self.layout.vocab) {
                return Err(Error::Model(format!("token id {bad} outside vocabulary")));
            }
        }
        let parts: Vec<(f64, usize, Vec<f64>)> =
            batch.par_iter().map(|s| self.nll_and_grad(s.ids())).collect();
        let mut grad = vec![0.0; self.layout.total];
        let mut nll = 0.0;
        let mut tokens = 0;
        for (n, c, g) in parts {
            nll += n;
            tokens += c;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if tokens == 0 {
            return Err(Error::Model("batch has no predictable tokens".into()));
        }
        let inv = 1.0 / tokens as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        let loss = nll * inv;
        if !loss.is_finite() {
            return Err(Error::Model("non-finite loss".into()));
        }
        Ok((loss, tokens, grad))
    }

    pub fn batch_loss(&self, batch: &[TokenSequence]) -> Result<f64> {
        let (nll, n) = batch
            .iter()
            .map(|s| self.sequence_nll(s.ids()))
            .fold((0.0, 0), |(a, b), (c, d)| (a + c, b + d));
        if n == 0 {
            return Err(Error::Model("batch has no predictable tokens".into()));
        }
        let loss = nll / n as f64;
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::Model("non-finite loss".into()))
        }
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            net: self,
            keys: vec![Vec::new(); self.layout.layers.len()],
            values: vec![Vec::new(); self.layout.layers.len()],
            len: 0,
        }
    }

    /// Next-token probabilities after `context` (last `context()` tokens).
    pub fn next_probs(&self, context: &[TokenId]) -> Vec<f64> {
        let window = &context[context.len().saturating_sub(self.layout.ctx)..];
        let mut s = self.session();
        let mut logits = Vec::new();
        for &tok in window {
            logits = s.push(tok);
        }
        if logits.is_empty() {
            return vec![1.0 / self.layout.vocab as f64; self.layout.vocab];
        }
        softmax_in_place(&mut logits);
        logits
    }
}

fn split_pair(grad: &mut [f64], a: usize, na: usize, b: usize, nb: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + na <= b);
    let (left, right) = grad.split_at_mut(b);
    (&mut left[a..a + na], &mut right[..nb])
}

/// Incremental decoding with cached keys and values.
pub struct Session<'m> {
    net: &'m Transformer,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl Session<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.net.layout.ctx
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn push(&mut self, token: TokenId) -> Vec<f64> {
        let net = self.net;
        let l = &net.layout;
        assert!(self.len < l.ctx, "session exceeds context window");
        let (d, ff, nh) = (l.d, l.ff, l.heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = self.len;
        let e = net.p(l.wte + token as usize * d, d);
        let pe = net.p(l.wpe + pos * d, d);
        let mut x: Vec<f64> = e.iter().zip(pe).map(|(a, b)| a + b).collect();
        for (li, lo) in l.layers.iter().enumerate() {
            let a = layernorm(&x, 1, d, net.p(lo.ln1_g, d), net.p(lo.ln1_b, d)).y;
            let q = linear(&a, 1, d, net.p(lo.wq, d * d), net.p(lo.bq, d), d);
            let k = linear(&a, 1, d, net.p(lo.wk, d * d), net.p(lo.bk, d), d);
            let v = linear(&a, 1, d, net.p(lo.wv, d * d), net.p(lo.bv, d), d);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let n = pos + 1;
            let keys = &self.keys[li];
            let vals = &self.values[li];
            let mut ctx = vec![0.0; d];
            let mut w = vec![0.0; n];
            for h in 0..nh {
                let ho = h * dh;
                let qh = &q[ho..ho + dh];
                for (j, s) in w.iter_mut().enumerate() {
                    let kj = &keys[j * d + ho..j * d + ho + dh];
                    *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut w);
                for (j, &pj) in w.iter().enumerate() {
                    let vj = &vals[j * d + ho..j * d + ho + dh];
                    for (c, &vv) in ctx[ho..ho + dh].iter_mut().zip(vj) {
                        *c += pj * vv;
                    }
                }
            }
            let o = linear(&ctx, 1, d, net.p(lo.wo, d * d), net.p(lo.bo, d), d);
            let hres: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let a2 = layernorm(&hres, 1, d, net.p(lo.ln2_g, d), net.p(lo.ln2_b, d)).y;
            let pre = linear(&a2, 1, d, net.p(lo.w1, d * ff), net.p(lo.b1, ff), ff);
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let m = linear(&act, 1, ff, net.p(lo.w2, ff * d), net.p(lo.b2, d), d);
            x = hres.iter().zip(&m).map(|(a, b)| a + b).collect();
        }
        self.len += 1;
        let xf = layernorm(&x, 1, d, net.p(l.lnf_g, d), net.p(l.lnf_b, d)).y;
        linear(
            &xf,
            1,
            d,
            net.p(l.w_head, d * l.vocab),
            net.p(l.b_head, l.vocab),
            l.vocab,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AdamState {
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) step: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Transformer LM with its vocabulary and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNeuralLM {
    config: NeuralConfig,
    vocab: Vocabulary,
    net: Transformer,
    pub(crate) adam: AdamState,
}

impl TinyNeuralLM {
    pub fn new(config: NeuralConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let net = Transformer::new(&config, vocab.len(), seed)?;
        let n = net.param_count();
        Ok(TinyNeuralLM {
            config,
            vocab,
            net,
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        })
    }

    pub(crate) fn from_parts(
        config: NeuralConfig,
        vocab: Vocabulary,
        net: Transformer,
        adam: AdamState,
    ) -> Self {
        TinyNeuralLM {
            config,
            vocab,
            net,
            adam,
        }
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn network(&self) -> &Transformer {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Transformer {
        &mut self.net
    }

    /// Trains `epochs` passes over `corpus`, returning the mean per-token NLL
    /// of each epoch (measured on each minibatch before its update).
    pub fn train_epochs(&mut self, corpus: &Corpus, epochs: usize, seed: u64) -> Result<Vec<f64>> {
        corpus.validate(self.vocab.len())?;
        let mut rng = rng::stream(seed, streams::TRAIN);
        let mut trace = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let (nll, tokens) = self.run_epoch(corpus, &mut rng, usize::MAX)?.0;
            trace.push(nll / tokens as f64);
        }
        Ok(trace)
    }

    /// Runs exactly `steps` optimizer updates, cycling through shuffled
    /// passes of `corpus`. Returns the per-pass mean NLL.
    pub fn train_steps(&mut self, corpus: &Corpus, steps: usize, seed: u64) -> Result<Vec<f64>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        corpus.validate(self.vocab.len())?;
        let mut rng = rng::stream(seed, streams::TRAIN);
        let mut left = steps;
        let mut trace = Vec::new();
        while left > 0 {
            let ((nll, tokens), done) = self.run_epoch(corpus, &mut rng, left)?;
            trace.push(nll / tokens as f64);
            left -= done;
        }
        Ok(trace)
    }

    fn run_epoch(
        &mut self,
        corpus: &Corpus,
        rng: &mut Rng,
        max_steps: usize,
    ) -> Result<((f64, usize), usize)> {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(rng);
        let mut nll = 0.0;
        let mut tokens = 0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            if steps == max_steps {
                break;
            }
            let batch: Vec<TokenSequence> =
                chunk.iter().map(|&i| corpus.sequences[i].clone()).collect();
            let (loss, n, grad) = self.net.batch_loss_and_grad(&batch)?;
            nll += loss * n as f64;
            tokens += n;
            self.apply_adam(grad);
            steps += 1;
        }
        Ok(((nll, tokens.max(1)), steps))
    }

    fn apply_adam(&mut self, mut grad: Vec<f64>) {
        if self.config.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.config.grad_clip {
                let s = self.config.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let st = &mut self.adam;
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.config.learning_rate;
        for (((p, g), m), v) in self
            .net
            .params
            .iter_mut()
            .zip(&grad)
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }

    pub fn mean_nll(&self, corpus: &Corpus) -> Result<f64> {
        self.net.batch_loss(&corpus.sequences)
    }
}

impl GenerativeBackend for TinyNeuralLM {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        self.net.next_probs(context)
    }

    fn sequence_logprob(&self, seq: &TokenSequence) -> f64 {
        if seq.len() <= self.net.context() + 1 {
            -self.net.sequence_nll(seq.ids()).0
        } else {
            super::chain_logprob(self, seq)
        }
    }

    fn sample_continuation(
        &self,
        prefix: &[TokenId],
        max_new: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Vec<TokenId> {
        let ctx = self.net.context();
        let mut all: Vec<TokenId> = prefix.to_vec();
        let mut out = Vec::new();
        let mut session = self.net.session();
        let mut logits = Vec::new();
        for &tok in &prefix[prefix.len().saturating_sub(ctx)..] {
            logits = session.push(tok);
        }
        let mask = SamplingMask::default();
        while out.len() < max_new {
            let mut probs = if logits.is_empty() {
                vec![1.0; self.net.vocab_size()]
            } else {
                let mut l = logits.clone();
                softmax_in_place(&mut l);
                l
            };
            let next = sample_index(&mut probs, temperature, &mask, rng);
            out.push(next);
            all.push(next);
            if next == EOS_ID || out.len() == max_new {
                break;
            }
            if session.is_full() {
                // context exhausted: rebuild from the most recent window
                session = self.net.session();
                for &tok in &all[all.len() - (ctx - 1)..] {
                    logits = session.push(tok);
                }
            } else {
                logits = session.push(next);
            }
        }
        out
    }
}

/// Largest relative error between the analytic gradient and central finite
/// differences over every parameter, with
/// `rel = |a - n| / max(|a| + |n|, floor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub parameters_checked: usize,
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

pub fn neural_gradient_check(net: &Transformer, batch: &[TokenSequence], epsilon: f64) -> Result<GradCheck> {
    if batch.is_empty() {
        return Err(Error::Model("gradient check needs a non-empty batch".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (_, _, analytic) = net.batch_loss_and_grad(batch)?;
    let results: Result<Vec<(usize, f64)>> = (0..net.param_count())
        .into_par_iter()
        .map(|i| {
            let mut probe = net.clone();
            let orig = probe.params[i];
            probe.params[i] = orig + epsilon;
            let up = probe.batch_loss(batch)?;
            probe.params[i] = orig - epsilon;
            let down = probe.batch_loss(batch)?;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
            Ok((i, rel))
        })
        .collect();
    let (worst, max) = results?
        .into_iter()
        .fold((0, 0.0), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    Ok(GradCheck {
        max_relative_error: max,
        worst_parameter: worst,
        parameters_checked: net.param_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NeuralConfig {
        NeuralConfig {
            d_model: 8,
            context: 12,
            layers: 2,
            heads: 2,
            ff_mult: 2,
            init_std: 0.3,
            ..NeuralConfig::default()
        }
    }

    fn batch() -> Vec<TokenSequence> {
        vec![
            TokenSequence(vec![0, 5, 3, 6, 2, 7, 3, 8, 1]),
            TokenSequence(vec![0, 7, 3, 5, 1]),
        ]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = Transformer::new(&tiny(), 9, 3).unwrap();
        assert!(net.param_count() <= 10_000);
        let gc = neural_gradient_check(&net, &batch(), 1e-4).unwrap();
        assert!(gc.max_relative_error < 1e-3, "{gc:?}");
    }

    #[test]
    fn head_bias_gradient_is_p_minus_onehot() {
        let cfg = NeuralConfig {
            d_model: 4,
            context: 4,
            layers: 1,
            heads: 1,
            ff_mult: 1,
            init_std: 0.5,
            ..NeuralConfig::default()
        };
        let net = Transformer::new(&cfg, 2, 9).unwrap();
        let seq = TokenSequence(vec![0, 1, 1, 0]);
        let (_, n, grad) = net.batch_loss_and_grad(std::slice::from_ref(&seq)).unwrap();
        let fc = net.forward(&seq.0[..3]);
        let targets = &seq.0[1..];
        let mut expected = [0.0; 2];
        for (i, &y) in targets.iter().enumerate() {
            for c in 0..2 {
                expected[c] += fc.probs[i * 2 + c] - f64::from(u8::from(c as u32 == y));
            }
        }
        let r = net.head_bias_range();
        for c in 0..2 {
            assert!((grad[r.start + c] - expected[c] / n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let net = Transformer::new(&tiny(), 9, 3).unwrap();
        assert!(neural_gradient_check(&net, &[], 1e-4).is_err());
    }

    #[test]
    fn session_matches_full_forward() {
        let net = Transformer::new(&tiny(), 9, 5).unwrap();
        let ids = [0u32, 5, 3, 6, 2];
        let fc = net.forward(&ids);
        let mut s = net.session();
        for (i, &t) in ids.iter().enumerate() {
            let mut logits = s.push(t);
            softmax_in_place(&mut logits);
            for (a, b) in logits.iter().zip(&fc.probs[i * 9..(i + 1) * 9]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"]);
        let mut lm = TinyNeuralLM::new(tiny(), vocab, 1).unwrap();
        let before = lm.clone();
        let mut c = Corpus::default();
        c.push(TokenSequence(vec![0, 5, 6, 1]), "t");
        assert!(lm.train_epochs(&c, 0, 1).unwrap().is_empty());
        assert!(lm.train_steps(&c, 0, 1).unwrap().is_empty());
        assert_eq!(lm, before);
    }
}
