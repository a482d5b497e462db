//! Stochastic Hard Concrete gates on attention heads, the expected-L0
//! penalty they induce, and physical head removal once fine-tuning has
//! driven gates shut.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttnBlock, HeadLayout, Mixer, Model};
use crate::tensor::{sigmoid_scalar, Scalar, Tensor};

pub const GAMMA: f64 = -0.1;
pub const ZETA: f64 = 1.1;
pub const BETA_TEMP: f64 = 2.0 / 3.0;

/// Fresh gates start strongly open so fine-tuning begins near the
/// ungated model.
pub const GATE_INIT_LOG_ALPHA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteGate {
    pub log_alpha: f64,
}

impl HardConcreteGate {
    pub fn new(log_alpha: f64) -> Self {
        Self { log_alpha }
    }

    pub fn fresh() -> Self {
        Self::new(GATE_INIT_LOG_ALPHA)
    }

    /// Stretched-and-clamped sample for one uniform draw.
    pub fn sample_gate(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::config(format!(
                "gate sample requires u in (0,1), got {u}"
            )));
        }
        let s = sigmoid_scalar(((u / (1.0 - u)).ln() + self.log_alpha) / BETA_TEMP);
        Ok((s * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0))
    }

    /// Closed-form probability that a sample lands exactly at zero.
    pub fn prob_zero(&self) -> f64 {
        sigmoid_scalar(BETA_TEMP * (-GAMMA / ZETA).ln() - self.log_alpha)
    }

    /// Test-time point estimate of the gate value.
    pub fn deterministic_gate(&self) -> f64 {
        (sigmoid_scalar(self.log_alpha) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
    }
}

/// One gate per attention head, laid out to match the model: per
/// encoder layer (self-attention), per decoder layer (encoder-decoder
/// attention, and self-attention when the decoder mixes with MHSA).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    pub enc_self: Vec<Vec<HardConcreteGate>>,
    pub enc_dec: Vec<Vec<HardConcreteGate>>,
    pub dec_self: Vec<Option<Vec<HardConcreteGate>>>,
}

impl GateSet {
    pub fn fresh_for<S: Scalar>(model: &Model<S>) -> Self {
        let fresh = |n: usize| vec![HardConcreteGate::fresh(); n];
        GateSet {
            enc_self: model
                .encoder
                .iter()
                .map(|l| fresh(l.self_attn.heads))
                .collect(),
            enc_dec: model.decoder.iter().map(|l| fresh(l.cross.heads)).collect(),
            dec_self: model
                .decoder
                .iter()
                .map(|l| match &l.mixer {
                    Mixer::Mhsa(b) => Some(fresh(b.heads)),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn validate_for<S: Scalar>(&self, model: &Model<S>) -> Result<()> {
        let bad = || Error::config("gate set does not match model head topology");
        if self.enc_self.len() != model.encoder.len()
            || self.enc_dec.len() != model.decoder.len()
            || self.dec_self.len() != model.decoder.len()
        {
            return Err(bad());
        }
        for (g, l) in self.enc_self.iter().zip(&model.encoder) {
            if g.len() != l.self_attn.heads {
                return Err(bad());
            }
        }
        for ((ged, gds), l) in self.enc_dec.iter().zip(&self.dec_self).zip(&model.decoder) {
            if ged.len() != l.cross.heads {
                return Err(bad());
            }
            match (&l.mixer, gds) {
                (Mixer::Mhsa(b), Some(g)) if g.len() == b.heads => {}
                (Mixer::Ssru(_) | Mixer::Aan(_), None) => {}
                _ => return Err(bad()),
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &HardConcreteGate> {
        self.enc_self
            .iter()
            .chain(&self.enc_dec)
            .flatten()
            .chain(self.dec_self.iter().flatten().flatten())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut HardConcreteGate> {
        self.enc_self
            .iter_mut()
            .chain(&mut self.enc_dec)
            .flatten()
            .chain(self.dec_self.iter_mut().flatten().flatten())
    }

    pub fn total_heads(&self) -> usize {
        self.iter().count()
    }
}

/// Eq-style expected L0: sum over gates of the probability of being
/// nonzero.
pub fn l0_penalty(gates: &GateSet) -> f64 {
    gates.iter().map(|g| 1.0 - g.prob_zero()).sum()
}

pub fn combined_loss(l_xent: f64, l_c: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::config(format!(
            "penalty weight must be nonnegative, got {lambda}"
        )));
    }
    Ok(l_xent + lambda * l_c)
}

/// Model with the deterministic gate values attached as static per-head
/// multipliers; reference semantics for what finalize_prune must match.
pub fn with_deterministic_gates<S: Scalar>(
    model: &Model<S>,
    gates: &GateSet,
) -> Result<Model<S>> {
    gates.validate_for(model)?;
    let mut m = model.clone();
    let vals = |gs: &[HardConcreteGate]| Some(gs.iter().map(|g| g.deterministic_gate()).collect());
    for (l, layer) in m.encoder.iter_mut().enumerate() {
        layer.self_attn.gates = vals(&gates.enc_self[l]);
    }
    for (l, layer) in m.decoder.iter_mut().enumerate() {
        layer.cross.gates = vals(&gates.enc_dec[l]);
        if let (Mixer::Mhsa(b), Some(g)) = (&mut layer.mixer, &gates.dec_self[l]) {
            b.gates = vals(g);
        }
    }
    Ok(m)
}

fn prune_block<S: Scalar>(
    model: &mut Model<S>,
    block: &mut AttnBlock,
    gate_values: &[f64],
    threshold: f64,
) -> Result<()> {
    let dh = block.head_dim;
    let survivors: Vec<usize> = (0..block.heads)
        .filter(|&h| gate_values[h] > threshold)
        .collect();
    let slice_heads = |w: &Tensor<S>| -> Result<Tensor<S>> {
        if survivors.is_empty() {
            return Tensor::from_vec(vec![w.rows(), 0], Vec::new());
        }
        let parts: Vec<Tensor<S>> = survivors
            .iter()
            .map(|&h| w.slice_cols(h * dh, dh))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        Tensor::concat_cols(&refs)
    };
    for id in [block.w_q, block.w_k, block.w_v] {
        let sliced = slice_heads(model.store.get(id))?;
        model.store.set(id, sliced);
    }
    // W_o: keep surviving row blocks, with the gate folded in.
    let w_o = model.store.get(block.w_o).clone();
    let d_out = w_o.cols();
    let mut data = Vec::with_capacity(survivors.len() * dh * d_out);
    for &h in &survivors {
        let g = S::from_f64(gate_values[h]);
        for r in h * dh..(h + 1) * dh {
            data.extend(w_o.row(r).iter().map(|&v| v * g));
        }
    }
    model
        .store
        .set(block.w_o, Tensor::from_vec(vec![survivors.len() * dh, d_out], data)?);
    block.heads = survivors.len();
    block.gates = None;
    Ok(())
}

/// Physically removes heads whose deterministic gate is at or below
/// `threshold` and folds surviving gate values into the output
/// projection. The result carries an explicit per-block head layout and
/// no gate machinery.
pub fn finalize_prune<S: Scalar>(
    model: &Model<S>,
    gates: &GateSet,
    threshold: f64,
) -> Result<Model<S>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::config(format!(
            "prune threshold must be in [0,1), got {threshold}"
        )));
    }
    gates.validate_for(model)?;
    let mut m = model.clone();
    let det = |gs: &[HardConcreteGate]| -> Vec<f64> {
        gs.iter().map(|g| g.deterministic_gate()).collect()
    };
    let mut encoder = std::mem::take(&mut m.encoder);
    for (l, layer) in encoder.iter_mut().enumerate() {
        prune_block(&mut m, &mut layer.self_attn, &det(&gates.enc_self[l]), threshold)?;
    }
    m.encoder = encoder;
    let mut decoder = std::mem::take(&mut m.decoder);
    for (l, layer) in decoder.iter_mut().enumerate() {
        prune_block(&mut m, &mut layer.cross, &det(&gates.enc_dec[l]), threshold)?;
        if let (Mixer::Mhsa(b), Some(g)) = (&mut layer.mixer, &gates.dec_self[l]) {
            prune_block(&mut m, b, &det(g), threshold)?;
        }
    }
    m.decoder = decoder;
    m.config.head_layout = Some(HeadLayout {
        enc_self: m.encoder.iter().map(|l| l.self_attn.heads).collect(),
        enc_dec: m.decoder.iter().map(|l| l.cross.heads).collect(),
        dec_self: m
            .decoder
            .iter()
            .map(|l| match &l.mixer {
                Mixer::Mhsa(b) => b.heads,
                _ => 0,
            })
            .collect(),
    });
    Ok(m)
}

/// Surviving head counts per attention group, formatted elsewhere as
/// "enc/enc-dec/dec" with "-" for decoders without self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadReport {
    pub enc: usize,
    pub enc_dec: usize,
    pub dec: Option<usize>,
}

impl std::fmt::Display for HeadReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.dec {
            Some(d) => write!(f, "{}/{}/{}", self.enc, self.enc_dec, d),
            None => write!(f, "{}/{}/-", self.enc, self.enc_dec),
        }
    }
}

pub fn head_report<S: Scalar>(model: &Model<S>) -> HeadReport {
    let enc = model.encoder.iter().map(|l| l.self_attn.heads).sum();
    let enc_dec = model.decoder.iter().map(|l| l.cross.heads).sum();
    let mut dec = None;
    for layer in &model.decoder {
        if let Mixer::Mhsa(b) = &layer.mixer {
            *dec.get_or_insert(0) += b.heads;
        }
    }
    HeadReport { enc, enc_dec, dec }
}
