//! Pre-norm Transformer encoder-decoder used by both the policy and the
//! value function. The training path records onto a [`Tape`]; the inference
//! path is tape-free and decodes one position at a time with cached
//! self-attention keys and values.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::TokenId;
use crate::seeding;
use crate::tape::{Tape, Var};
use crate::tensor::{
    self, gelu, layer_norm_rows, matmul_into, softmax_in_place, Precision, Tensor,
    TensorError,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    Token { token: TokenId, vocab: usize },
    #[error("sequence of length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("source must contain at least one token")]
    EmptySource,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub vocab_size: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl PolicyConfig {
    /// Desk-scale defaults for a given vocabulary and length limits.
    pub fn desk(vocab_size: usize, max_source_len: usize, max_target_len: usize) -> Self {
        PolicyConfig {
            width: 32,
            layers: 2,
            heads: 2,
            ff_width: 64,
            vocab_size,
            max_source_len,
            max_target_len,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let extents = [
            ("width", self.width),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("vocab_size", self.vocab_size),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(NetError::Config(format!("{name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(NetError::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    norm1: NormIdx,
    attn: AttnIdx,
    norm2: NormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    norm1: NormIdx,
    self_attn: AttnIdx,
    norm2: NormIdx,
    cross: AttnIdx,
    norm3: NormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    src_pos: usize,
    tgt_pos: usize,
    enc: Vec<EncLayer>,
    enc_norm: NormIdx,
    dec: Vec<DecLayer>,
    dec_norm: NormIdx,
    head_w: usize,
    head_b: usize,
}

enum Init {
    Normal(f64),
    Const(f64),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.add(name, vec![fan_in, fan_out], Init::Normal(std))
    }

    fn norm(&mut self, prefix: &str, width: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), vec![width], Init::Const(1.0)),
            bias: self.add(format!("{prefix}.bias"), vec![width], Init::Const(0.0)),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.linear(format!("{prefix}.wq"), d, d),
            wk: self.linear(format!("{prefix}.wk"), d, d),
            wv: self.linear(format!("{prefix}.wv"), d, d),
            wo: self.linear(format!("{prefix}.wo"), d, d),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize) -> FfIdx {
        FfIdx {
            w1: self.linear(format!("{prefix}.w1"), d, f),
            b1: self.add(format!("{prefix}.b1"), vec![f], Init::Const(0.0)),
            w2: self.linear(format!("{prefix}.w2"), f, d),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Const(0.0)),
        }
    }
}

fn build_layout(cfg: &PolicyConfig, out_dim: usize) -> (Layout, Builder) {
    let d = cfg.width;
    let mut b = Builder {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let tok_emb = b.add("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal(0.5));
    let src_pos = b.add("src_pos".into(), vec![cfg.max_source_len, d], Init::Normal(0.5));
    let tgt_pos = b.add("tgt_pos".into(), vec![cfg.max_target_len, d], Init::Normal(0.5));
    let enc = (0..cfg.layers)
        .map(|l| {
            let p = format!("enc{l}");
            EncLayer {
                norm1: b.norm(&format!("{p}.norm1"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                norm2: b.norm(&format!("{p}.norm2"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.ff_width),
            }
        })
        .collect();
    let enc_norm = b.norm("enc_norm", d);
    let dec = (0..cfg.layers)
        .map(|l| {
            let p = format!("dec{l}");
            DecLayer {
                norm1: b.norm(&format!("{p}.norm1"), d),
                self_attn: b.attn(&format!("{p}.self"), d),
                norm2: b.norm(&format!("{p}.norm2"), d),
                cross: b.attn(&format!("{p}.cross"), d),
                norm3: b.norm(&format!("{p}.norm3"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.ff_width),
            }
        })
        .collect();
    let dec_norm = b.norm("dec_norm", d);
    let head_w = b.add("head.w".into(), vec![d, out_dim], Init::Normal(0.1 / (d as f64).sqrt()));
    let head_b = b.add("head.b".into(), vec![out_dim], Init::Const(0.0));
    (
        Layout {
            tok_emb,
            src_pos,
            tgt_pos,
            enc,
            enc_norm,
            dec,
            dec_norm,
            head_w,
            head_b,
        },
        b,
    )
}

/// Encoder-decoder mapping `(source, decoder input)` to one `out_dim`-wide
/// row per decoder position.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: PolicyConfig,
    out_dim: usize,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
    precision: Precision,
}

impl PartialEq for Seq2Seq {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.out_dim == other.out_dim
            && self.names == other.names
            && self.params == other.params
    }
}

impl Seq2Seq {
    pub fn new(config: PolicyConfig, out_dim: usize, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        if out_dim == 0 {
            return Err(NetError::Config("out_dim must be at least 1".into()));
        }
        let (layout, b) = build_layout(&config, out_dim);
        let mut rng = seeding::rng(seed);
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Const(c) => vec![*c; n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, *std).expect("positive std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                Tensor::new(shape.clone(), data).expect("shape matches")
            })
            .collect();
        Ok(Seq2Seq {
            config,
            out_dim,
            layout,
            names: b.names,
            params,
            precision: Precision::F64,
        })
    }

    /// Rebuilds a network from named tensors, checking names and shapes.
    pub fn from_params(
        config: PolicyConfig,
        out_dim: usize,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, NetError> {
        let mut net = Seq2Seq::new(config, out_dim, 0)?;
        if named.len() != net.params.len() {
            return Err(NetError::Config(format!(
                "expected {} parameter tensors, found {}",
                net.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != net.names[i] || t.shape() != net.params[i].shape() {
                return Err(NetError::Config(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    net.names[i],
                    net.params[i].shape(),
                    t.shape()
                )));
            }
            net.params[i] = t;
        }
        Ok(net)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, p: Precision) {
        self.precision = p;
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.params)
    }

    /// Mutable access by name, for hand-built networks in tests.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_tokens(&self, tokens: &[TokenId], max: usize) -> Result<(), NetError> {
        if tokens.len() > max {
            return Err(NetError::TooLong {
                len: tokens.len(),
                max,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(NetError::Token {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Teacher-forced forward pass on the tape; returns `[T, out_dim]`.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &[Var],
        source: &[TokenId],
        dec_input: &[TokenId],
    ) -> Result<Var, NetError> {
        if source.is_empty() {
            return Err(NetError::EmptySource);
        }
        self.check_tokens(source, self.config.max_source_len)?;
        self.check_tokens(dec_input, self.config.max_target_len)?;
        let lay = &self.layout;
        let h = self.config.heads;

        let pos: Vec<usize> = (0..source.len()).collect();
        let e = tape.gather_rows(p[lay.tok_emb], source)?;
        let pe = tape.gather_rows(p[lay.src_pos], &pos)?;
        let mut x = tape.add(e, pe)?;
        for l in &lay.enc {
            let n = norm_t(tape, p, l.norm1, x)?;
            let a = attention_t(tape, p, l.attn, n, n, h, false)?;
            x = tape.add(x, a)?;
            let n = norm_t(tape, p, l.norm2, x)?;
            let f = ff_t(tape, p, l.ff, n)?;
            x = tape.add(x, f)?;
        }
        let mem = norm_t(tape, p, lay.enc_norm, x)?;

        let pos: Vec<usize> = (0..dec_input.len()).collect();
        let e = tape.gather_rows(p[lay.tok_emb], dec_input)?;
        let pe = tape.gather_rows(p[lay.tgt_pos], &pos)?;
        let mut y = tape.add(e, pe)?;
        for l in &lay.dec {
            let n = norm_t(tape, p, l.norm1, y)?;
            let a = attention_t(tape, p, l.self_attn, n, n, h, true)?;
            y = tape.add(y, a)?;
            let n = norm_t(tape, p, l.norm2, y)?;
            let a = attention_t(tape, p, l.cross, n, mem, h, false)?;
            y = tape.add(y, a)?;
            let n = norm_t(tape, p, l.norm3, y)?;
            let f = ff_t(tape, p, l.ff, n)?;
            y = tape.add(y, f)?;
        }
        let out = norm_t(tape, p, lay.dec_norm, y)?;
        let logits = tape.matmul(out, p[lay.head_w])?;
        Ok(tape.add_row(logits, p[lay.head_b])?)
    }

    /// Tape-free encoder pass. Cross-attention keys and values are computed
    /// once here and reused by every decoding step.
    pub fn encode(&self, source: &[TokenId]) -> Result<Memory, NetError> {
        if source.is_empty() {
            return Err(NetError::EmptySource);
        }
        self.check_tokens(source, self.config.max_source_len)?;
        let d = self.config.width;
        let lay = &self.layout;
        let n = source.len();
        let prec = self.precision;
        let mut x = vec![0.0; n * d];
        for (i, &t) in source.iter().enumerate() {
            let e = self.params[lay.tok_emb].row(t);
            let pe = self.params[lay.src_pos].row(i);
            for c in 0..d {
                x[i * d + c] = e[c] + pe[c];
            }
        }
        prec.round_slice(&mut x);
        for l in &lay.enc {
            let nx = self.norm(l.norm1, &x, n);
            let q = self.linear(l.attn.wq, &nx, n);
            let k = self.linear(l.attn.wk, &nx, n);
            let v = self.linear(l.attn.wv, &nx, n);
            let a = self.attend(&q, n, &k, &v, n, false);
            let a = self.linear(l.attn.wo, &a, n);
            add_assign(&mut x, &a, prec);
            let nx = self.norm(l.norm2, &x, n);
            let f = self.ff(l.ff, &nx, n);
            add_assign(&mut x, &f, prec);
        }
        let mem = self.norm(lay.enc_norm, &x, n);
        let cross = lay
            .dec
            .iter()
            .map(|l| {
                (
                    self.linear(l.cross.wk, &mem, n),
                    self.linear(l.cross.wv, &mem, n),
                )
            })
            .collect();
        Ok(Memory { len: n, cross })
    }

    pub fn start_decoding(&self) -> DecoderCache {
        DecoderCache {
            pos: 0,
            keys: vec![Vec::new(); self.layout.dec.len()],
            values: vec![Vec::new(); self.layout.dec.len()],
        }
    }

    /// Feeds one decoder input token and returns the output row for that
    /// position.
    pub fn decode_step(
        &self,
        mem: &Memory,
        cache: &mut DecoderCache,
        token: TokenId,
    ) -> Result<Vec<f64>, NetError> {
        if cache.pos >= self.config.max_target_len {
            return Err(NetError::TooLong {
                len: cache.pos + 1,
                max: self.config.max_target_len,
            });
        }
        self.check_tokens(&[token], usize::MAX)?;
        let d = self.config.width;
        let lay = &self.layout;
        let prec = self.precision;
        let e = self.params[lay.tok_emb].row(token);
        let pe = self.params[lay.tgt_pos].row(cache.pos);
        let mut y: Vec<f64> = e.iter().zip(pe).map(|(a, b)| a + b).collect();
        prec.round_slice(&mut y);
        let t = cache.pos + 1;
        for (li, l) in lay.dec.iter().enumerate() {
            let ny = self.norm(l.norm1, &y, 1);
            let q = self.linear(l.self_attn.wq, &ny, 1);
            cache.keys[li].extend(self.linear(l.self_attn.wk, &ny, 1));
            cache.values[li].extend(self.linear(l.self_attn.wv, &ny, 1));
            let a = self.attend(&q, 1, &cache.keys[li], &cache.values[li], t, false);
            let a = self.linear(l.self_attn.wo, &a, 1);
            add_assign(&mut y, &a, prec);

            let ny = self.norm(l.norm2, &y, 1);
            let q = self.linear(l.cross.wq, &ny, 1);
            let (k, v) = &mem.cross[li];
            let a = self.attend(&q, 1, k, v, mem.len, false);
            let a = self.linear(l.cross.wo, &a, 1);
            add_assign(&mut y, &a, prec);

            let ny = self.norm(l.norm3, &y, 1);
            let f = self.ff(l.ff, &ny, 1);
            add_assign(&mut y, &f, prec);
        }
        cache.pos += 1;
        let out = self.norm(lay.dec_norm, &y, 1);
        let mut logits = self.linear(lay.head_w, &out, 1);
        for (o, b) in logits.iter_mut().zip(self.params[lay.head_b].data()) {
            *o += b;
        }
        prec.round_slice(&mut logits);
        debug_assert_eq!(logits.len(), self.out_dim);
        let _ = d;
        Ok(logits)
    }

    /// Teacher-forced rows for every decoder position without a tape.
    pub fn forward_rows(
        &self,
        source: &[TokenId],
        dec_input: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, NetError> {
        let mem = self.encode(source)?;
        let mut cache = self.start_decoding();
        dec_input
            .iter()
            .map(|&t| self.decode_step(&mem, &mut cache, t))
            .collect()
    }

    fn linear(&self, w: usize, x: &[f64], rows: usize) -> Vec<f64> {
        let wt = &self.params[w];
        let (k, n) = (wt.shape()[0], wt.shape()[1]);
        let mut out = vec![0.0; rows * n];
        matmul_into(x, wt.data(), rows, k, n, &mut out);
        self.precision.round_slice(&mut out);
        out
    }

    fn norm(&self, idx: NormIdx, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.config.width;
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv = vec![0.0; rows];
        layer_norm_rows(
            x,
            rows,
            d,
            self.params[idx.gain].data(),
            self.params[idx.bias].data(),
            &mut out,
            &mut xhat,
            &mut inv,
        );
        self.precision.round_slice(&mut out);
        out
    }

    fn ff(&self, idx: FfIdx, x: &[f64], rows: usize) -> Vec<f64> {
        let mut hdn = self.linear(idx.w1, x, rows);
        let f = self.config.ff_width;
        let b1 = self.params[idx.b1].data();
        for r in 0..rows {
            for c in 0..f {
                let v = hdn[r * f + c] + b1[c];
                hdn[r * f + c] = gelu(self.precision.round(v));
            }
        }
        self.precision.round_slice(&mut hdn);
        let mut out = self.linear(idx.w2, &hdn, rows);
        let d = self.config.width;
        let b2 = self.params[idx.b2].data();
        for r in 0..rows {
            for c in 0..d {
                out[r * d + c] += b2[c];
            }
        }
        self.precision.round_slice(&mut out);
        out
    }

    fn attend(
        &self,
        q: &[f64],
        nq: usize,
        k: &[f64],
        v: &[f64],
        nk: usize,
        causal: bool,
    ) -> Vec<f64> {
        let d = self.config.width;
        let h = self.config.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; nq * d];
        let mut scores = vec![0.0; nk];
        for head in 0..h {
            let off = head * dh;
            for i in 0..nq {
                let qi = &q[i * d + off..i * d + off + dh];
                let keep = if causal { (i + 1).min(nk) } else { nk };
                for j in 0..keep {
                    let s = tensor::dot(qi, &k[j * d + off..j * d + off + dh]);
                    scores[j] = self.precision.round(self.precision.round(s) * scale);
                }
                softmax_in_place(&mut scores[..keep]);
                self.precision.round_slice(&mut scores[..keep]);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..keep {
                    let vj = &v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        oi[c] += scores[j] * vj[c];
                    }
                }
            }
        }
        self.precision.round_slice(&mut out);
        out
    }
}

fn add_assign(x: &mut [f64], y: &[f64], prec: Precision) {
    for (a, b) in x.iter_mut().zip(y) {
        *a = prec.round(*a + b);
    }
}

fn norm_t(tape: &mut Tape<'_>, p: &[Var], idx: NormIdx, x: Var) -> Result<Var, TensorError> {
    tape.layer_norm(x, p[idx.gain], p[idx.bias])
}

fn ff_t(tape: &mut Tape<'_>, p: &[Var], idx: FfIdx, x: Var) -> Result<Var, TensorError> {
    let h = tape.matmul(x, p[idx.w1])?;
    let h = tape.add_row(h, p[idx.b1])?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, p[idx.w2])?;
    tape.add_row(o, p[idx.b2])
}

fn attention_t(
    tape: &mut Tape<'_>,
    p: &[Var],
    idx: AttnIdx,
    query_in: Var,
    kv_in: Var,
    heads: usize,
    causal: bool,
) -> Result<Var, TensorError> {
    let q = tape.matmul(query_in, p[idx.wq])?;
    let k = tape.matmul(kv_in, p[idx.wk])?;
    let v = tape.matmul(kv_in, p[idx.wv])?;
    let d = tape.value(q).shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let kh = tape.slice_cols(k, hd * dh, dh)?;
        let vh = tape.slice_cols(v, hd * dh, dh)?;
        let s = tape.matmul_bt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s, causal)?;
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(cat, p[idx.wo])
}

/// Encoder output prepared for decoding: per decoder layer, the projected
/// cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct Memory {
    len: usize,
    cross: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DecoderCache {
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Random tokens for tests and benchmarks.
pub fn random_tokens<R: Rng>(rng: &mut R, len: usize, lo: TokenId, hi: TokenId) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}
