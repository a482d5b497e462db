//! Transformer encoder/decoder with pluggable decoder token-mixing
//! layers (multi-head self-attention, SSRU, or cumulative-average), an
//! optional decoder feed-forward block, and per-head gate multipliers.

pub mod forward;
pub mod infer;
pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParamId;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderKind {
    Mhsa,
    Ssru,
    SsruFused,
    Aan,
}

impl DecoderKind {
    pub fn is_ssru(self) -> bool {
        matches!(self, DecoderKind::Ssru | DecoderKind::SsruFused)
    }
}

/// Per-attention-block surviving head counts; present only on pruned
/// models. Full models use `n_heads` everywhere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub enc_self: Vec<usize>,
    pub enc_dec: Vec<usize>,
    pub dec_self: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub decoder_kind: DecoderKind,
    #[serde(default = "default_true")]
    pub decoder_ffn: bool,
    #[serde(default)]
    pub aan_gating: bool,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_layout: Option<HeadLayout>,
}

fn default_true() -> bool {
    true
}

fn default_max_len() -> usize {
    256
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::config("enc_layers and dec_layers must be >= 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(Error::config("vocabularies must reserve pad/bos/eos/unk"));
        }
        if let Some(hl) = &self.head_layout {
            if hl.enc_self.len() != self.enc_layers
                || hl.enc_dec.len() != self.dec_layers
                || (self.decoder_kind == DecoderKind::Mhsa
                    && hl.dec_self.len() != self.dec_layers)
            {
                return Err(Error::config("head_layout does not match layer counts"));
            }
            for &h in hl
                .enc_self
                .iter()
                .chain(hl.enc_dec.iter())
                .chain(hl.dec_self.iter())
            {
                if h > self.n_heads {
                    return Err(Error::config("head_layout exceeds n_heads"));
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn heads_for(&self, group: HeadGroup, layer: usize) -> usize {
        match &self.head_layout {
            None => self.n_heads,
            Some(hl) => match group {
                HeadGroup::EncSelf => hl.enc_self[layer],
                HeadGroup::EncDec => hl.enc_dec[layer],
                HeadGroup::DecSelf => hl.dec_self[layer],
            },
        }
    }

    /// Closed-form parameter count; cross-checked against the stored
    /// tensors in tests.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let dh = self.head_dim();
        let attn = |h: usize| 4 * d * h * dh;
        let ffn = d * self.d_ffn + self.d_ffn + self.d_ffn * d + d;
        let norm = 2 * d;

        let mut total = (self.src_vocab + self.tgt_vocab) * d;
        for l in 0..self.enc_layers {
            total += attn(self.heads_for(HeadGroup::EncSelf, l)) + ffn + 2 * norm;
        }
        total += norm; // encoder final norm
        for l in 0..self.dec_layers {
            total += match self.decoder_kind {
                DecoderKind::Mhsa => attn(self.heads_for(HeadGroup::DecSelf, l)),
                DecoderKind::Ssru | DecoderKind::SsruFused => 2 * d * d + d,
                DecoderKind::Aan => {
                    ffn + if self.aan_gating {
                        2 * d * 2 * d + 2 * d
                    } else {
                        0
                    }
                }
            };
            total += attn(self.heads_for(HeadGroup::EncDec, l));
            total += 2 * norm; // mixer + cross norms
            if self.decoder_ffn {
                total += ffn + norm;
            }
        }
        total += norm; // decoder final norm
        total += d * self.tgt_vocab + self.tgt_vocab; // output projection
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadGroup {
    EncSelf,
    EncDec,
    DecSelf,
}

/// Flat parameter storage; layers hold `ParamId` handles into it.
#[derive(Clone)]
pub struct ParamStore<S> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<S>) {
        self.entries[id.0].1 = t;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Multi-head attention block. Projections carry no bias, so a block
/// whose heads are all removed is an exact zero map. `gates` holds
/// static per-head multipliers (deterministic gate values) when present.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub heads: usize,
    pub head_dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub gates: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum SsruWeights {
    /// Single [d, 2d] matrix; left block is the forget projection,
    /// right block the input projection.
    Fused { w_cat: ParamId },
    Split { w_f: ParamId, w: ParamId },
}

#[derive(Clone, Debug)]
pub struct SsruLayer {
    pub weights: SsruWeights,
    pub b_f: ParamId,
}

#[derive(Clone, Debug)]
pub struct AanLayer {
    pub ffn: Ffn,
    pub gate: Option<(ParamId, ParamId)>, // (w_g [2d, 2d], b_g [2d])
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Mhsa(AttnBlock),
    Ssru(SsruLayer),
    Aan(AanLayer),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: AttnBlock,
    pub norm_attn: Norm,
    pub ffn: Ffn,
    pub norm_ffn: Norm,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub mixer: Mixer,
    pub norm_mixer: Norm,
    pub cross: AttnBlock,
    pub norm_cross: Norm,
    pub ffn: Option<(Ffn, Norm)>,
}

#[derive(Clone)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: Norm,
    pub out_proj: ParamId,
    pub out_bias: ParamId,
    /// Sinusoidal position table [max_len, d_model]; constant, not a
    /// parameter.
    pub positions: Tensor<S>,
}

struct Builder<S: Scalar> {
    store: ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Builder<S> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        // uniform Xavier/Glorot
        let r = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| S::from_f64(self.rng.gen_range(-r..r)))
            .collect();
        self.store
            .add(name, Tensor::from_vec(vec![rows, cols], data).unwrap())
    }

    fn embedding(&mut self, name: String, vocab: usize, d: usize) -> ParamId {
        let r = (d as f64).powf(-0.5);
        let data = (0..vocab * d)
            .map(|_| S::from_f64(self.rng.gen_range(-r..r)))
            .collect();
        self.store
            .add(name, Tensor::from_vec(vec![vocab, d], data).unwrap())
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(vec![n]))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        let gain = self
            .store
            .add(format!("{prefix}.gain"), Tensor::filled(vec![d], S::one()));
        let bias = self.zeros(format!("{prefix}.bias"), d);
        Norm { gain, bias }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ffn: usize) -> Ffn {
        Ffn {
            w1: self.matrix(format!("{prefix}.w1"), d, d_ffn),
            b1: self.zeros(format!("{prefix}.b1"), d_ffn),
            w2: self.matrix(format!("{prefix}.w2"), d_ffn, d),
            b2: self.zeros(format!("{prefix}.b2"), d),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, heads: usize, head_dim: usize) -> AttnBlock {
        let width = heads * head_dim;
        AttnBlock {
            heads,
            head_dim,
            w_q: self.matrix(format!("{prefix}.w_q"), d, width),
            w_k: self.matrix(format!("{prefix}.w_k"), d, width),
            w_v: self.matrix(format!("{prefix}.w_v"), d, width),
            w_o: self.matrix(format!("{prefix}.w_o"), width, d),
            gates: None,
        }
    }
}

/// Sinusoidal position encodings, [max_len, d_model].
pub fn sinusoidal_positions<S: Scalar>(max_len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(max_len * d);
    for t in 0..max_len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(S::from_f64(if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }));
        }
    }
    Tensor::from_vec(vec![max_len, d], data).unwrap()
}

/// Builds a model with all parameters drawn deterministically from the
/// seed. The split and fused SSRU variants draw identical values so the
/// two parameterizations of one seed stay interconvertible.
pub fn build_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let d = config.d_model;
    let dh = config.head_dim();
    let mut b = Builder::<S> {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    let src_embed = b.embedding("src_embed".into(), config.src_vocab, d);
    let tgt_embed = b.embedding("tgt_embed".into(), config.tgt_vocab, d);

    let mut encoder = Vec::with_capacity(config.enc_layers);
    for l in 0..config.enc_layers {
        let heads = config.heads_for(HeadGroup::EncSelf, l);
        let self_attn = b.attn(&format!("enc.{l}.self"), d, heads, dh);
        let norm_attn = b.norm(&format!("enc.{l}.norm_attn"), d);
        let ffn = b.ffn(&format!("enc.{l}.ffn"), d, config.d_ffn);
        let norm_ffn = b.norm(&format!("enc.{l}.norm_ffn"), d);
        encoder.push(EncoderLayer {
            self_attn,
            norm_attn,
            ffn,
            norm_ffn,
        });
    }
    let enc_norm = b.norm("enc.final_norm", d);

    let mut decoder = Vec::with_capacity(config.dec_layers);
    for l in 0..config.dec_layers {
        let mixer = match config.decoder_kind {
            DecoderKind::Mhsa => {
                let heads = config.heads_for(HeadGroup::DecSelf, l);
                Mixer::Mhsa(b.attn(&format!("dec.{l}.self"), d, heads, dh))
            }
            DecoderKind::Ssru | DecoderKind::SsruFused => {
                // draw the forget and input projections separately so the
                // fused matrix is their column concatenation
                let w_f_id = b.matrix(format!("dec.{l}.ssru.w_f"), d, d);
                let w_id = b.matrix(format!("dec.{l}.ssru.w"), d, d);
                let b_f = b.zeros(format!("dec.{l}.ssru.b_f"), d);
                let weights = if config.decoder_kind == DecoderKind::SsruFused {
                    let w_f = b.store.get(w_f_id).clone();
                    let w = b.store.get(w_id).clone();
                    let cat = Tensor::concat_cols(&[&w_f, &w])?;
                    // replace the two split tensors with the fused one;
                    // the split ids stay in the store but unused entries
                    // are dropped below by rebuilding
                    let w_cat = b.store.add(format!("dec.{l}.ssru.w_cat"), cat);
                    SsruWeights::Fused { w_cat }
                } else {
                    SsruWeights::Split { w_f: w_f_id, w: w_id }
                };
                Mixer::Ssru(SsruLayer { weights, b_f })
            }
            DecoderKind::Aan => {
                let ffn = b.ffn(&format!("dec.{l}.aan.ffn"), d, config.d_ffn);
                let gate = if config.aan_gating {
                    let w_g = b.matrix(format!("dec.{l}.aan.w_g"), 2 * d, 2 * d);
                    let b_g = b.zeros(format!("dec.{l}.aan.b_g"), 2 * d);
                    Some((w_g, b_g))
                } else {
                    None
                };
                Mixer::Aan(AanLayer { ffn, gate })
            }
        };
        let norm_mixer = b.norm(&format!("dec.{l}.norm_mixer"), d);
        let heads = config.heads_for(HeadGroup::EncDec, l);
        let cross = b.attn(&format!("dec.{l}.cross"), d, heads, dh);
        let norm_cross = b.norm(&format!("dec.{l}.norm_cross"), d);
        let ffn = if config.decoder_ffn {
            let f = b.ffn(&format!("dec.{l}.ffn"), d, config.d_ffn);
            let n = b.norm(&format!("dec.{l}.norm_ffn"), d);
            Some((f, n))
        } else {
            None
        };
        decoder.push(DecoderLayer {
            mixer,
            norm_mixer,
            cross,
            norm_cross,
            ffn,
        });
    }
    let dec_norm = b.norm("dec.final_norm", d);
    // small output-projection init keeps step-1 logits near uniform
    // (first-step loss ~ ln V)
    let out_proj = b.matrix("out_proj".into(), d, config.tgt_vocab);
    let small = b.store.get(out_proj).scale(S::from_f64(0.1));
    b.store.set(out_proj, small);
    let out_bias = b.zeros("out_bias".into(), config.tgt_vocab);

    let mut model = Model {
        config: config.clone(),
        store: b.store,
        src_embed,
        tgt_embed,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
        out_proj,
        out_bias,
        positions: sinusoidal_positions(config.max_len, d),
    };
    if config.decoder_kind == DecoderKind::SsruFused {
        model = compact_store(model);
    }
    Ok(model)
}

/// Rebuilds the store keeping only parameters referenced by the model
/// structure (used after fused-SSRU construction drops the split
/// matrices).
fn compact_store<S: Scalar>(model: Model<S>) -> Model<S> {
    let mut keep = vec![false; model.store.len()];
    model.visit_params(|id| keep[id.0] = true);
    let mut remap = vec![ParamId(usize::MAX); model.store.len()];
    let mut store = ParamStore::new();
    for (id, name, t) in model.store.iter() {
        if keep[id.0] {
            remap[id.0] = store.add(name.to_string(), t.clone());
        }
    }
    let mut m = model;
    m.remap_params(&remap);
    m.store = store;
    m
}

impl<S: Scalar> Model<S> {
    /// Total learnable values.
    pub fn param_count(&self) -> usize {
        self.store.total_values()
    }

    pub fn visit_params(&self, mut f: impl FnMut(ParamId)) {
        f(self.src_embed);
        f(self.tgt_embed);
        for l in &self.encoder {
            for id in [l.self_attn.w_q, l.self_attn.w_k, l.self_attn.w_v, l.self_attn.w_o] {
                f(id);
            }
            for id in [l.norm_attn.gain, l.norm_attn.bias, l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2, l.norm_ffn.gain, l.norm_ffn.bias] {
                f(id);
            }
        }
        f(self.enc_norm.gain);
        f(self.enc_norm.bias);
        for l in &self.decoder {
            match &l.mixer {
                Mixer::Mhsa(a) => {
                    for id in [a.w_q, a.w_k, a.w_v, a.w_o] {
                        f(id);
                    }
                }
                Mixer::Ssru(s) => {
                    match s.weights {
                        SsruWeights::Fused { w_cat } => f(w_cat),
                        SsruWeights::Split { w_f, w } => {
                            f(w_f);
                            f(w);
                        }
                    }
                    f(s.b_f);
                }
                Mixer::Aan(a) => {
                    for id in [a.ffn.w1, a.ffn.b1, a.ffn.w2, a.ffn.b2] {
                        f(id);
                    }
                    if let Some((w_g, b_g)) = a.gate {
                        f(w_g);
                        f(b_g);
                    }
                }
            }
            for id in [l.norm_mixer.gain, l.norm_mixer.bias] {
                f(id);
            }
            for id in [l.cross.w_q, l.cross.w_k, l.cross.w_v, l.cross.w_o] {
                f(id);
            }
            for id in [l.norm_cross.gain, l.norm_cross.bias] {
                f(id);
            }
            if let Some((ffn, norm)) = &l.ffn {
                for id in [ffn.w1, ffn.b1, ffn.w2, ffn.b2, norm.gain, norm.bias] {
                    f(id);
                }
            }
        }
        f(self.dec_norm.gain);
        f(self.dec_norm.bias);
        f(self.out_proj);
        f(self.out_bias);
    }

    fn remap_params(&mut self, remap: &[ParamId]) {
        let r = |id: &mut ParamId| *id = remap[id.0];
        r(&mut self.src_embed);
        r(&mut self.tgt_embed);
        for l in &mut self.encoder {
            r(&mut l.self_attn.w_q);
            r(&mut l.self_attn.w_k);
            r(&mut l.self_attn.w_v);
            r(&mut l.self_attn.w_o);
            r(&mut l.norm_attn.gain);
            r(&mut l.norm_attn.bias);
            r(&mut l.ffn.w1);
            r(&mut l.ffn.b1);
            r(&mut l.ffn.w2);
            r(&mut l.ffn.b2);
            r(&mut l.norm_ffn.gain);
            r(&mut l.norm_ffn.bias);
        }
        r(&mut self.enc_norm.gain);
        r(&mut self.enc_norm.bias);
        for l in &mut self.decoder {
            match &mut l.mixer {
                Mixer::Mhsa(a) => {
                    r(&mut a.w_q);
                    r(&mut a.w_k);
                    r(&mut a.w_v);
                    r(&mut a.w_o);
                }
                Mixer::Ssru(s) => {
                    match &mut s.weights {
                        SsruWeights::Fused { w_cat } => r(w_cat),
                        SsruWeights::Split { w_f, w } => {
                            r(w_f);
                            r(w);
                        }
                    }
                    r(&mut s.b_f);
                }
                Mixer::Aan(a) => {
                    r(&mut a.ffn.w1);
                    r(&mut a.ffn.b1);
                    r(&mut a.ffn.w2);
                    r(&mut a.ffn.b2);
                    if let Some((w_g, b_g)) = &mut a.gate {
                        r(w_g);
                        r(b_g);
                    }
                }
            }
            r(&mut l.norm_mixer.gain);
            r(&mut l.norm_mixer.bias);
            r(&mut l.cross.w_q);
            r(&mut l.cross.w_k);
            r(&mut l.cross.w_v);
            r(&mut l.cross.w_o);
            r(&mut l.norm_cross.gain);
            r(&mut l.norm_cross.bias);
            if let Some((ffn, norm)) = &mut l.ffn {
                r(&mut ffn.w1);
                r(&mut ffn.b1);
                r(&mut ffn.w2);
                r(&mut ffn.b2);
                r(&mut norm.gain);
                r(&mut norm.bias);
            }
        }
        r(&mut self.dec_norm.gain);
        r(&mut self.dec_norm.bias);
        r(&mut self.out_proj);
        r(&mut self.out_bias);
    }

    /// Converts between split and fused SSRU parameterizations. Returns
    /// an equivalent model; non-SSRU models pass through unchanged.
    pub fn with_ssru_fusion(&self, fused: bool) -> Result<Model<S>>
    where
        S: Scalar,
    {
        if !self.config.decoder_kind.is_ssru() {
            return Err(Error::config("model has no SSRU decoder"));
        }
        let mut config = self.config.clone();
        config.decoder_kind = if fused {
            DecoderKind::SsruFused
        } else {
            DecoderKind::Ssru
        };
        let mut m = build_model::<S>(&config, 0)?;
        // overwrite the fresh parameters with converted ones, by name
        let d = self.config.d_model;
        for (id, name, t) in self.store.iter() {
            let _ = id;
            if let Some(stripped) = name.strip_suffix(".w_cat") {
                if !fused {
                    let w_f = t.slice_cols(0, d)?;
                    let w = t.slice_cols(d, d)?;
                    let fid = m
                        .store
                        .find(&format!("{stripped}.w_f"))
                        .ok_or_else(|| Error::config("missing w_f"))?;
                    let wid = m
                        .store
                        .find(&format!("{stripped}.w"))
                        .ok_or_else(|| Error::config("missing w"))?;
                    m.store.set(fid, w_f);
                    m.store.set(wid, w);
                    continue;
                }
            }
            if let Some(target) = m.store.find(name) {
                m.store.set(target, t.clone());
            } else if fused {
                // split -> fused: fill the w_cat halves
                if let Some(stripped) = name.strip_suffix(".w_f") {
                    let cat_id = m
                        .store
                        .find(&format!("{stripped}.w_cat"))
                        .ok_or_else(|| Error::config("missing w_cat"))?;
                    let other = self
                        .store
                        .find(&format!("{stripped}.w"))
                        .ok_or_else(|| Error::config("missing w"))?;
                    let cat = Tensor::concat_cols(&[&t.clone(), self.store.get(other)])?;
                    m.store.set(cat_id, cat);
                }
                // ".w" handled together with ".w_f"
            }
        }
        // carry over static gates
        for (src, dst) in self.encoder.iter().zip(m.encoder.iter_mut()) {
            dst.self_attn.gates = src.self_attn.gates.clone();
        }
        for (src, dst) in self.decoder.iter().zip(m.decoder.iter_mut()) {
            dst.cross.gates = src.cross.gates.clone();
        }
        Ok(m)
    }
}
