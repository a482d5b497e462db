//! Tape-free layer primitives. The training graph in `forward` composes
//! the same kernels in the same order, so both paths agree bitwise.

use crate::error::Result;
use crate::model::{AanLayer, AttnBlock, Ffn, ParamStore, SsruLayer, SsruWeights};
use crate::tensor::{Scalar, Tensor};

/// Additive mask value for disallowed attention positions. Large enough
/// that the softmax weight underflows to exactly zero.
pub const NEG_INF: f64 = -1e9;

pub fn ffn_apply<S: Scalar>(ffn: &Ffn, store: &ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let h = x
        .matmul(store.get(ffn.w1))?
        .add_row(store.get(ffn.b1))?
        .relu();
    h.matmul(store.get(ffn.w2))?.add_row(store.get(ffn.b2))
}

/// One SSRU recurrence step. `x_t` and `c_prev` are [1, d] rows; returns
/// `(o_t, c_t)`.
pub fn ssru_step<S: Scalar>(
    layer: &SsruLayer,
    store: &ParamStore<S>,
    x_t: &Tensor<S>,
    c_prev: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let d = x_t.cols();
    match layer.weights {
        SsruWeights::Fused { w_cat } => {
            // the fusion payoff: one matmul, then a single pass that
            // gates and updates the cell without intermediate tensors
            let pre = x_t.matmul(store.get(w_cat))?;
            let bf = store.get(layer.b_f).data();
            let prev = c_prev.data();
            let row = pre.data();
            let mut c = Vec::with_capacity(d);
            for j in 0..d {
                let ft = crate::tensor::sigmoid_scalar(row[j] + bf[j]);
                c.push(ft * prev[j] + (S::one() - ft) * row[d + j]);
            }
            let c_t = Tensor::from_vec(vec![1, d], c)?;
            Ok((c_t.relu(), c_t))
        }
        SsruWeights::Split { w_f, w } => {
            let f = x_t
                .matmul(store.get(w_f))?
                .add_row(store.get(layer.b_f))?
                .sigmoid();
            let z = x_t.matmul(store.get(w))?;
            let mut c = Vec::with_capacity(d);
            for j in 0..d {
                let ft = f.data()[j];
                c.push(ft * c_prev.data()[j] + (S::one() - ft) * z.data()[j]);
            }
            let c_t = Tensor::from_vec(vec![1, d], c)?;
            Ok((c_t.relu(), c_t))
        }
    }
}

/// Whole-sequence SSRU; identical to folding `ssru_step` over t.
pub fn ssru_forward_sequence<S: Scalar>(
    layer: &SsruLayer,
    store: &ParamStore<S>,
    x: &Tensor<S>,
    c_init: &Tensor<S>,
) -> Result<Tensor<S>> {
    let d = x.cols();
    let mut c = c_init.reshaped(vec![1, d])?;
    let mut rows = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let x_t = Tensor::from_vec(vec![1, d], x.row(t).to_vec())?;
        let (o, c_next) = ssru_step(layer, store, &x_t, &c)?;
        c = c_next;
        rows.push(o);
    }
    let refs: Vec<&Tensor<S>> = rows.iter().collect();
    Tensor::concat_rows(&refs)
}

/// One cumulative-average step. `running_sum` is the sum of inputs at
/// positions < t; `t` is 1-based. Returns `(o_t, new_sum)`.
pub fn aan_step<S: Scalar>(
    layer: &AanLayer,
    store: &ParamStore<S>,
    x_t: &Tensor<S>,
    running_sum: &Tensor<S>,
    t: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let new_sum = running_sum.add(x_t)?;
    let inv = S::one() / S::from_f64(t as f64);
    let mean = new_sum.scale(inv);
    let mut o = ffn_apply(&layer.ffn, store, &mean)?;
    if let Some((w_g, b_g)) = layer.gate {
        let d = x_t.cols();
        let cat = Tensor::concat_cols(&[x_t, &o])?;
        let g = cat.matmul(store.get(w_g))?.add_row(store.get(b_g))?.sigmoid();
        let gi = g.slice_cols(0, d)?;
        let gf = g.slice_cols(d, d)?;
        o = gi.mul(x_t)?.add(&gf.mul(&o)?)?;
    }
    Ok((o, new_sum))
}

/// Causal additive mask [t, t]: position i may attend to keys <= i.
pub fn causal_mask<S: Scalar>(t: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = S::from_f64(NEG_INF);
        }
    }
    Tensor::from_vec(vec![t, t], data).unwrap()
}

/// Additive key-padding mask [tq, tk] from a per-key pad flag vector.
pub fn key_pad_mask<S: Scalar>(tq: usize, pad: &[bool]) -> Tensor<S> {
    let tk = pad.len();
    let mut row = vec![S::zero(); tk];
    for (j, &p) in pad.iter().enumerate() {
        if p {
            row[j] = S::from_f64(NEG_INF);
        }
    }
    let mut data = Vec::with_capacity(tq * tk);
    for _ in 0..tq {
        data.extend_from_slice(&row);
    }
    Tensor::from_vec(vec![tq, tk], data).unwrap()
}

/// Full (non-incremental) multi-head attention with optional causal and
/// key-padding masks. Per-head outputs are scaled by the block's static
/// gates when present. A block with zero heads is a zero map.
pub fn mha_full<S: Scalar>(
    block: &AttnBlock,
    store: &ParamStore<S>,
    q_in: &Tensor<S>,
    kv_in: &Tensor<S>,
    causal: bool,
    key_pad: Option<&[bool]>,
) -> Result<Tensor<S>> {
    if block.heads == 0 {
        return Ok(Tensor::zeros(vec![q_in.rows(), q_in.cols()]));
    }
    let dh = block.head_dim;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let q = q_in.matmul(store.get(block.w_q))?;
    let k = kv_in.matmul(store.get(block.w_k))?;
    let v = kv_in.matmul(store.get(block.w_v))?;
    let mask = {
        let mut m: Option<Tensor<S>> = causal.then(|| causal_mask(q_in.rows()));
        if let Some(pad) = key_pad {
            let pm = key_pad_mask(q_in.rows(), pad);
            m = Some(match m {
                Some(prev) => prev.add(&pm)?,
                None => pm,
            });
        }
        m
    };
    let mut heads = Vec::with_capacity(block.heads);
    for i in 0..block.heads {
        let qi = q.slice_cols(i * dh, dh)?;
        let ki = k.slice_cols(i * dh, dh)?;
        let vi = v.slice_cols(i * dh, dh)?;
        let mut scores = qi.matmul(&ki.transpose())?.scale(scale);
        if let Some(m) = &mask {
            scores = scores.add(m)?;
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
