//! Teacher-forced training forward pass recorded on the autodiff tape.
//! Composition order mirrors `layers`/`infer` exactly.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::layers::causal_mask;
use crate::model::{AttnBlock, Ffn, Mixer, Model, Norm, SsruWeights, LN_EPS};
use crate::tensor::{Scalar, Tensor};

pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Sampled gate nodes for one training batch, one scalar Var per head.
/// Built by the fine-tuning loop; `None` entries are ungated blocks.
#[derive(Default)]
pub struct GateVars {
    pub enc_self: Vec<Option<Vec<Var>>>,
    pub enc_dec: Vec<Option<Vec<Var>>>,
    pub dec_self: Vec<Option<Vec<Var>>>,
}

impl GateVars {
    fn enc_self_for(&self, layer: usize) -> Option<&[Var]> {
        self.enc_self.get(layer).and_then(|v| v.as_deref())
    }
    fn enc_dec_for(&self, layer: usize) -> Option<&[Var]> {
        self.enc_dec.get(layer).and_then(|v| v.as_deref())
    }
    fn dec_self_for(&self, layer: usize) -> Option<&[Var]> {
        self.dec_self.get(layer).and_then(|v| v.as_deref())
    }
}

impl<S: Scalar> Model<S> {
    /// First `t` rows of the sinusoidal position table.
    pub fn pos_slice(&self, t: usize) -> Result<Tensor<S>> {
        if t > self.config.max_len {
            return Err(Error::config(format!(
                "sequence length {t} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let d = self.config.d_model;
        Tensor::from_vec(vec![t, d], self.positions.data()[..t * d].to_vec())
    }
}

fn ln_tape<S: Scalar>(m: &Model<S>, tape: &mut Tape<S>, x: Var, norm: &Norm) -> Result<Var> {
    let gain = tape.param(norm.gain, m.store.get(norm.gain));
    let bias = tape.param(norm.bias, m.store.get(norm.bias));
    tape.layer_norm(x, gain, bias, S::from_f64(LN_EPS))
}

fn ffn_tape<S: Scalar>(m: &Model<S>, tape: &mut Tape<S>, x: Var, ffn: &Ffn) -> Result<Var> {
    let w1 = tape.param(ffn.w1, m.store.get(ffn.w1));
    let b1 = tape.param(ffn.b1, m.store.get(ffn.b1));
    let w2 = tape.param(ffn.w2, m.store.get(ffn.w2));
    let b2 = tape.param(ffn.b2, m.store.get(ffn.b2));
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w2)?;
    tape.add_row(h, b2)
}

/// Multi-head attention on the tape. Returns `None` for a zero-head
/// block (the residual then passes through unchanged).
fn mha_tape<S: Scalar>(
    m: &Model<S>,
    tape: &mut Tape<S>,
    block: &AttnBlock,
    q_in: Var,
    kv_in: Var,
    causal: bool,
    head_gates: Option<&[Var]>,
) -> Result<Option<Var>> {
    if block.heads == 0 {
        return Ok(None);
    }
    let dh = block.head_dim;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let w_q = tape.param(block.w_q, m.store.get(block.w_q));
    let w_k = tape.param(block.w_k, m.store.get(block.w_k));
    let w_v = tape.param(block.w_v, m.store.get(block.w_v));
    let w_o = tape.param(block.w_o, m.store.get(block.w_o));
    let q = tape.matmul(q_in, w_q)?;
    let k = tape.matmul(kv_in, w_k)?;
    let v = tape.matmul(kv_in, w_v)?;
    let t_q = tape.value(q).rows();
    let mask: Option<Tensor<S>> = causal.then(|| causal_mask(t_q));
    let mut heads = Vec::with_capacity(block.heads);
    for i in 0..block.heads {
        let qi = tape.slice_cols(q, i * dh, dh)?;
        let ki = tape.slice_cols(k, i * dh, dh)?;
        let vi = tape.slice_cols(v, i * dh, dh)?;
        let kit = tape.transpose(ki);
        let mut scores = tape.matmul(qi, kit)?;
        scores = tape.scale(scores, scale);
        if let Some(mask) = &mask {
            scores = tape.add_const(scores, mask.clone())?;
        }
        let att = tape.softmax_rows(scores);
        let mut h = tape.matmul(att, vi)?;
        if let Some(gates) = &block.gates {
            h = tape.scale(h, S::from_f64(gates[i]));
        }
        if let Some(gvars) = head_gates {
            h = tape.scale_by_scalar(h, gvars[i])?;
        }
        heads.push(h);
    }
    let cat = tape.concat_cols(&heads)?;
    Ok(Some(tape.matmul(cat, w_o)?))
}

/// Encoder forward on the tape; returns the memory node [S, d_model].
pub fn encode_tape<S: Scalar>(
    m: &Model<S>,
    tape: &mut Tape<S>,
    src: &[u32],
    gates: Option<&GateVars>,
) -> Result<Var> {
    let d = m.config.d_model;
    let embed = tape.param(m.src_embed, m.store.get(m.src_embed));
    let mut x = tape.embed(embed, src)?;
    x = tape.scale(x, S::from_f64((d as f64).sqrt()));
    x = tape.add_const(x, m.pos_slice(src.len())?)?;
    for (l, layer) in m.encoder.iter().enumerate() {
        let h = ln_tape(m, tape, x, &layer.norm_attn)?;
        let head_gates = gates.and_then(|g| g.enc_self_for(l));
        if let Some(a) = mha_tape(m, tape, &layer.self_attn, h, h, false, head_gates)? {
            x = tape.add(x, a)?;
        }
        let h = ln_tape(m, tape, x, &layer.norm_ffn)?;
        let f = ffn_tape(m, tape, h, &layer.ffn)?;
        x = tape.add(x, f)?;
    }
    ln_tape(m, tape, x, &m.enc_norm)
}

/// Teacher-forced decoder on the tape; `tgt_in` starts with BOS.
/// Returns logits [T, tgt_vocab].
pub fn decoder_logits_tape<S: Scalar>(
    m: &Model<S>,
    tape: &mut Tape<S>,
    memory: Var,
    tgt_in: &[u32],
    gates: Option<&GateVars>,
) -> Result<Var> {
    let d = m.config.d_model;
    let embed = tape.param(m.tgt_embed, m.store.get(m.tgt_embed));
    let mut x = tape.embed(embed, tgt_in)?;
    x = tape.scale(x, S::from_f64((d as f64).sqrt()));
    // the recurrence provides token order for SSRU; attention-style
    // mixers need explicit positions
    if !m.config.decoder_kind.is_ssru() {
        x = tape.add_const(x, m.pos_slice(tgt_in.len())?)?;
    }
    for (l, layer) in m.decoder.iter().enumerate() {
        let h = ln_tape(m, tape, x, &layer.norm_mixer)?;
        match &layer.mixer {
            Mixer::Mhsa(block) => {
                let head_gates = gates.and_then(|g| g.dec_self_for(l));
                if let Some(a) = mha_tape(m, tape, block, h, h, true, head_gates)? {
                    x = tape.add(x, a)?;
                }
            }
            Mixer::Ssru(ssru) => {
                let b_f = tape.param(ssru.b_f, m.store.get(ssru.b_f));
                let (f, z) = match ssru.weights {
                    SsruWeights::Fused { w_cat } => {
                        let w = tape.param(w_cat, m.store.get(w_cat));
                        let pre = tape.matmul(h, w)?;
                        let f_pre = tape.slice_cols(pre, 0, d)?;
                        let f_pre = tape.add_row(f_pre, b_f)?;
                        (tape.sigmoid(f_pre), tape.slice_cols(pre, d, d)?)
                    }
                    SsruWeights::Split { w_f, w } => {
                        let w_f = tape.param(w_f, m.store.get(w_f));
                        let w = tape.param(w, m.store.get(w));
                        let f_pre = tape.matmul(h, w_f)?;
                        let f_pre = tape.add_row(f_pre, b_f)?;
                        (tape.sigmoid(f_pre), tape.matmul(h, w)?)
                    }
                };
                let c = tape.ssru_scan(f, z)?;
                let o = tape.relu(c);
                x = tape.add(x, o)?;
            }
            Mixer::Aan(aan) => {
                let a = tape.cummean_rows(h);
                let mut o = ffn_tape(m, tape, a, &aan.ffn)?;
                if let Some((w_g, b_g)) = aan.gate {
                    let w_g = tape.param(w_g, m.store.get(w_g));
                    let b_g = tape.param(b_g, m.store.get(b_g));
                    let cat = tape.concat_cols(&[h, o])?;
                    let g = tape.matmul(cat, w_g)?;
                    let g = tape.add_row(g, b_g)?;
                    let g = tape.sigmoid(g);
                    let gi = tape.slice_cols(g, 0, d)?;
                    let gf = tape.slice_cols(g, d, d)?;
                    let a1 = tape.mul(gi, h)?;
                    let a2 = tape.mul(gf, o)?;
                    o = tape.add(a1, a2)?;
                }
                x = tape.add(x, o)?;
            }
        }
        let h = ln_tape(m, tape, x, &layer.norm_cross)?;
        let head_gates = gates.and_then(|g| g.enc_dec_for(l));
        if let Some(a) = mha_tape(m, tape, &layer.cross, h, memory, false, head_gates)? {
            x = tape.add(x, a)?;
        }
        if let Some((ffn, norm)) = &layer.ffn {
            let h = ln_tape(m, tape, x, norm)?;
            let f = ffn_tape(m, tape, h, ffn)?;
            x = tape.add(x, f)?;
        }
    }
    let x = ln_tape(m, tape, x, &m.dec_norm)?;
    let w = tape.param(m.out_proj, m.store.get(m.out_proj));
    let b = tape.param(m.out_bias, m.store.get(m.out_bias));
    let logits = tape.matmul(x, w)?;
    tape.add_row(logits, b)
}

pub fn teacher_forced_logits<S: Scalar>(
    m: &Model<S>,
    tape: &mut Tape<S>,
    src: &[u32],
    tgt_in: &[u32],
    gates: Option<&GateVars>,
) -> Result<Var> {
    let memory = encode_tape(m, tape, src, gates)?;
    decoder_logits_tape(m, tape, memory, tgt_in, gates)
}

/// Label-smoothed cross entropy for one sentence pair; `tgt` carries no
/// BOS/EOS. Returns the loss node and the number of target positions.
pub fn sentence_loss<S: Scalar>(
    m: &Model<S>,
    tape: &mut Tape<S>,
    src: &[u32],
    tgt: &[u32],
    eps_ls: S,
    gates: Option<&GateVars>,
) -> Result<(Var, usize)> {
    let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(tgt);
    let mut targets = tgt.to_vec();
    targets.push(EOS);
    let logits = teacher_forced_logits(m, tape, src, &tgt_in, gates)?;
    let loss = tape.cross_entropy_ls(logits, &targets, eps_ls)?;
    Ok((loss, targets.len()))
}
