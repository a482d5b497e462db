//! Tape-free inference: full encoder forward and incremental
//! autoregressive decoder steps with per-layer-kind state caches.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::layers::{aan_step, ffn_apply, mha_full, ssru_step};
use crate::model::{AttnBlock, Mixer, Model, Norm, ParamStore, LN_EPS};
use crate::tensor::{Scalar, Tensor};

fn ln<S: Scalar>(m: &Model<S>, x: &Tensor<S>, norm: &Norm) -> Result<Tensor<S>> {
    x.layer_norm(
        m.store.get(norm.gain),
        m.store.get(norm.bias),
        S::from_f64(LN_EPS),
    )
}

/// Full encoder forward for one sentence. `pad_mask[i] = true` marks a
/// padding position, which is then invisible as an attention key.
pub fn encode<S: Scalar>(
    m: &Model<S>,
    src: &[u32],
    pad_mask: Option<&[bool]>,
) -> Result<Tensor<S>> {
    if let Some(pm) = pad_mask {
        if pm.len() != src.len() {
            return Err(Error::shape("pad mask length mismatch".to_string()));
        }
    }
    let d = m.config.d_model;
    let mut x = m
        .store
        .get(m.src_embed)
        .gather_rows(src)?
        .scale(S::from_f64((d as f64).sqrt()));
    x = x.add(&m.pos_slice(src.len())?)?;
    for layer in &m.encoder {
        let h = ln(m, &x, &layer.norm_attn)?;
        if layer.self_attn.heads > 0 {
            let a = mha_full(&layer.self_attn, &m.store, &h, &h, false, pad_mask)?;
            x = x.add(&a)?;
        }
        let h = ln(m, &x, &layer.norm_ffn)?;
        x = x.add(&ffn_apply(&layer.ffn, &m.store, &h)?)?;
    }
    ln(m, &x, &m.enc_norm)
}

/// Per-layer incremental state.
#[derive(Clone)]
enum LayerState<S> {
    Ssru { c: Tensor<S> },
    Aan { sum: Tensor<S> },
    Mhsa { cache: Vec<Tensor<S>> }, // one [1, heads*dh] K|V row pair per step
}

#[derive(Clone)]
struct MhsaCacheRow<S> {
    k: Tensor<S>,
    v: Tensor<S>,
}

/// Precomputed encoder-side keys/values for one cross-attention block.
pub struct EncDecKv<S> {
    pub k: Tensor<S>,
    pub v: Tensor<S>,
}

/// Incremental decode state for one hypothesis. SSRU and averaging
/// layers keep O(1) state; self-attention caches grow one row per step.
/// Encoder-decoder keys/values are computed once per source sentence and
/// shared across clones.
#[derive(Clone)]
pub struct DecodeState<S> {
    step: usize,
    layers: Vec<LayerState<S>>,
    mhsa_v: Vec<Vec<MhsaCacheRow<S>>>,
    encdec: Arc<Vec<EncDecKv<S>>>,
    src_pad: Arc<Option<Vec<bool>>>,
}

impl<S: Scalar> DecodeState<S> {
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Total cached self-attention rows, for structural assertions.
    pub fn mhsa_cache_len(&self) -> usize {
        self.mhsa_v.iter().map(|c| c.len()).sum()
    }

    pub fn encdec_kv(&self) -> &[EncDecKv<S>] {
        &self.encdec
    }
}

pub fn init_decode_state<S: Scalar>(
    m: &Model<S>,
    memory: &Tensor<S>,
    src_pad: Option<Vec<bool>>,
) -> Result<DecodeState<S>> {
    let d = m.config.d_model;
    let mut layers = Vec::with_capacity(m.decoder.len());
    let mut mhsa_v = Vec::with_capacity(m.decoder.len());
    let mut encdec = Vec::with_capacity(m.decoder.len());
    for layer in &m.decoder {
        layers.push(match &layer.mixer {
            Mixer::Ssru(_) => LayerState::Ssru {
                c: Tensor::zeros(vec![1, d]),
            },
            Mixer::Aan(_) => LayerState::Aan {
                sum: Tensor::zeros(vec![1, d]),
            },
            Mixer::Mhsa(_) => LayerState::Mhsa { cache: Vec::new() },
        });
        mhsa_v.push(Vec::new());
        encdec.push(EncDecKv {
            k: memory.matmul(m.store.get(layer.cross.w_k))?,
            v: memory.matmul(m.store.get(layer.cross.w_v))?,
        });
    }
    Ok(DecodeState {
        step: 0,
        layers,
        mhsa_v,
        encdec: Arc::new(encdec),
        src_pad: Arc::new(src_pad),
    })
}

/// Attention of a single query row against cached or precomputed K/V.
fn attend_row<S: Scalar>(
    block: &AttnBlock,
    store: &ParamStore<S>,
    q_row: &Tensor<S>,
    k_all: &Tensor<S>,
    v_all: &Tensor<S>,
    key_pad: Option<&[bool]>,
) -> Result<Tensor<S>> {
    let dh = block.head_dim;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let q = q_row.matmul(store.get(block.w_q))?;
    let mut heads = Vec::with_capacity(block.heads);
    for i in 0..block.heads {
        let qi = q.slice_cols(i * dh, dh)?;
        let ki = k_all.slice_cols(i * dh, dh)?;
        let vi = v_all.slice_cols(i * dh, dh)?;
        let mut scores = qi.matmul(&ki.transpose())?.scale(scale);
        if let Some(pad) = key_pad {
            let mask = crate::model::layers::key_pad_mask(1, pad);
            scores = scores.add(&mask)?;
        }
        let mut h = scores.softmax_rows().matmul(&vi)?;
        if let Some(gates) = &block.gates {
            h = h.scale(S::from_f64(gates[i]));
        }
        heads.push(h);
    }
    let refs: Vec<&Tensor<S>> = heads.iter().collect();
    Tensor::concat_cols(&refs)?.matmul(store.get(block.w_o))
}

/// One autoregressive decoder step: consumes the token decoded at the
/// previous position (BOS for the first step) and returns the logits row
/// for the next position.
pub fn decoder_step<S: Scalar>(
    m: &Model<S>,
    state: &mut DecodeState<S>,
    y_t: u32,
) -> Result<Tensor<S>> {
    if state.layers.len() != m.decoder.len() {
        return Err(Error::config(
            "decode state does not match model decoder depth",
        ));
    }
    let d = m.config.d_model;
    let t = state.step;
    let mut x = m
        .store
        .get(m.tgt_embed)
        .gather_rows(&[y_t])?
        .scale(S::from_f64((d as f64).sqrt()));
    if !m.config.decoder_kind.is_ssru() {
        let pos = m.pos_slice(t + 1)?;
        let pos_row = Tensor::from_vec(vec![1, d], pos.row(t).to_vec())?;
        x = x.add(&pos_row)?;
    }
    for (l, layer) in m.decoder.iter().enumerate() {
        let h = ln(m, &x, &layer.norm_mixer)?;
        match (&layer.mixer, &mut state.layers[l]) {
            (Mixer::Ssru(ssru), LayerState::Ssru { c }) => {
                let (o, c_next) = ssru_step(ssru, &m.store, &h, c)?;
                *c = c_next;
                x = x.add(&o)?;
            }
            (Mixer::Aan(aan), LayerState::Aan { sum }) => {
                let (o, new_sum) = aan_step(aan, &m.store, &h, sum, t + 1)?;
                *sum = new_sum;
                x = x.add(&o)?;
            }
            (Mixer::Mhsa(block), LayerState::Mhsa { cache }) => {
                if block.heads > 0 {
                    let k_t = h.matmul(m.store.get(block.w_k))?;
                    let v_t = h.matmul(m.store.get(block.w_v))?;
                    cache.push(k_t.clone());
                    state.mhsa_v[l].push(MhsaCacheRow { k: k_t, v: v_t });
                    let rows = &state.mhsa_v[l];
                    let k_refs: Vec<&Tensor<S>> = rows.iter().map(|r| &r.k).collect();
                    let v_refs: Vec<&Tensor<S>> = rows.iter().map(|r| &r.v).collect();
                    let k_all = Tensor::concat_rows(&k_refs)?;
                    let v_all = Tensor::concat_rows(&v_refs)?;
                    let a = attend_row(block, &m.store, &h, &k_all, &v_all, None)?;
                    x = x.add(&a)?;
                }
            }
            _ => {
                return Err(Error::config(
                    "decode state layer kind does not match model",
                ))
            }
        }
        let h = ln(m, &x, &layer.norm_cross)?;
        if layer.cross.heads > 0 {
            let kv = &state.encdec[l];
            let a = attend_row(
                &layer.cross,
                &m.store,
                &h,
                &kv.k,
                &kv.v,
                state.src_pad.as_ref().as_deref(),
            )?;
            x = x.add(&a)?;
        }
        if let Some((ffn, norm)) = &layer.ffn {
            let h = ln(m, &x, norm)?;
            x = x.add(&ffn_apply(ffn, &m.store, &h)?)?;
        }
    }
    let x = ln(m, &x, &m.dec_norm)?;
    state.step = t + 1;
    x.matmul(m.store.get(m.out_proj))?
        .add_row(m.store.get(m.out_bias))
}
