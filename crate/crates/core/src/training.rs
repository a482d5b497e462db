//! Synthetic-task training: Adam with inverse-square-root schedule,
//! label-smoothed cross entropy, stochastic-gate fine-tuning, and
//! sequence-level distillation from a teacher model.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{beam_search, greedy_decode, BeamConfig};
use crate::error::{Error, Result};
use crate::graph::{GradMap, ParamId, Tape, Var};
use crate::model::forward::{sentence_loss, GateVars};
use crate::model::{Mixer, Model};
use crate::pruning::{GateSet, BETA_TEMP, GAMMA, ZETA};
use crate::tensor::{Scalar, Tensor};

fn default_peak_lr() -> f64 {
    7e-4
}
fn default_warmup() -> usize {
    400
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-9
}
fn default_eps_ls() -> f64 {
    0.1
}
fn default_batch_tokens() -> usize {
    2000
}
fn default_eval_interval() -> usize {
    100
}
fn default_gate_lr_mult() -> f64 {
    25.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_eps_ls")]
    pub eps_ls: f64,
    #[serde(default = "default_batch_tokens")]
    pub batch_tokens: usize,
    pub max_updates: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub lambda: f64,
    /// Learning-rate multiplier for gate log-alphas during fine-tuning;
    /// gates need to travel several units while weights barely move.
    #[serde(default = "default_gate_lr_mult")]
    pub gate_lr_mult: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.warmup_steps == 0 || self.batch_tokens == 0 || self.max_updates == 0 {
            return Err(Error::config("steps and batch sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.eps_ls) {
            return Err(Error::config("label smoothing must be in [0,1)"));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config("Adam betas must be in [0,1)"));
            }
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        Ok(())
    }
}

pub fn lr_at(step: usize, cfg: &TrainingConfig) -> f64 {
    assert!(step >= 1, "schedule starts at step 1");
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ToyGrammarTranslation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

pub type Pair = (Vec<u32>, Vec<u32>);

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

fn rewrite_toy_grammar(src: &[u32], vocab: usize) -> Vec<u32> {
    // deterministic "translation": shift each data token through the
    // data alphabet, then swap adjacent positions pairwise
    let data = (vocab - 4) as u32;
    let mut out: Vec<u32> = src.iter().map(|&v| 4 + ((v - 4 + 5) % data)).collect();
    for pair in out.chunks_mut(2) {
        if pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
    out
}

pub fn target_for(kind: TaskKind, src: &[u32], vocab: usize) -> Vec<u32> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::ToyGrammarTranslation => rewrite_toy_grammar(src, vocab),
    }
}

/// Deterministic synthetic pairs with disjoint train/valid/test source
/// sets.
pub fn generate_task_data(spec: &TaskSpec) -> Result<Dataset> {
    if spec.vocab < 5 {
        return Err(Error::config(
            "task vocab must leave room for data tokens beyond the 4 reserved ids",
        ));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::config("bad task length range"));
    }
    let total = spec.train_size + spec.valid_size + spec.test_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut sources = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sources.len() < total {
        attempts += 1;
        if attempts > total * 200 {
            return Err(Error::config(
                "task space too small for requested dataset sizes",
            ));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<u32> = (0..len).map(|_| rng.gen_range(4..spec.vocab as u32)).collect();
        if seen.insert(src.clone()) {
            sources.push(src);
        }
    }
    let pair = |src: Vec<u32>| {
        let tgt = target_for(spec.kind, &src, spec.vocab);
        (src, tgt)
    };
    let mut it = sources.into_iter();
    Ok(Dataset {
        train: it.by_ref().take(spec.train_size).map(pair).collect(),
        valid: it.by_ref().take(spec.valid_size).map(pair).collect(),
        test: it.map(pair).collect(),
    })
}

/// Per-parameter first/second moments over an explicit id list.
pub struct AdamState<S> {
    ids: Vec<ParamId>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    /// Per-parameter learning-rate multiplier (1.0 for weights; gate
    /// parameters use a larger factor so log-alphas can travel).
    lr_scale: Vec<f64>,
    pub step: usize,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[(ParamId, &Tensor<S>)]) -> Self {
        AdamState {
            ids: params.iter().map(|(id, _)| *id).collect(),
            lr_scale: vec![1.0; params.len()],
            m: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            v: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            step: 0,
        }
    }

    pub fn set_lr_scale(&mut self, index: usize, scale: f64) {
        self.lr_scale[index] = scale;
    }

    /// One bias-corrected Adam update; missing gradients mean zero.
    /// Returns the updated parameter tensors in id order.
    pub fn step(
        &mut self,
        params: &[Tensor<S>],
        grads: &GradMap<S>,
        lr: f64,
        cfg: &TrainingConfig,
    ) -> Result<Vec<Tensor<S>>> {
        if params.len() != self.ids.len() {
            return Err(Error::shape("Adam state/parameter count mismatch".to_string()));
        }
        self.step += 1;
        let b1 = S::from_f64(cfg.adam_beta1);
        let b2 = S::from_f64(cfg.adam_beta2);
        let eps = S::from_f64(cfg.adam_eps);
        let c1 = S::from_f64(1.0 - cfg.adam_beta1.powi(self.step as i32));
        let c2 = S::from_f64(1.0 - cfg.adam_beta2.powi(self.step as i32));
        let mut out = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let lr = S::from_f64(lr * self.lr_scale[i]);
            let zero;
            let g = match grads.get(self.ids[i]) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape().to_vec());
                    &zero
                }
            };
            if !g.all_finite() {
                return Err(Error::Train(format!(
                    "non-finite gradient at step {} (parameter index {i})",
                    self.step
                )));
            }
            let mut mi = self.m[i].data().to_vec();
            let mut vi = self.v[i].data().to_vec();
            let mut pv = p.data().to_vec();
            for ((m, v), (x, &gj)) in mi
                .iter_mut()
                .zip(vi.iter_mut())
                .zip(pv.iter_mut().zip(g.data().iter()))
            {
                *m = b1 * *m + (S::one() - b1) * gj;
                *v = b2 * *v + (S::one() - b2) * gj * gj;
                let mh = *m / c1;
                let vh = *v / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
            self.m[i] = Tensor::from_vec(p.shape().to_vec(), mi)?;
            self.v[i] = Tensor::from_vec(p.shape().to_vec(), vi)?;
            out.push(Tensor::from_vec(p.shape().to_vec(), pv)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub l0_penalty: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,train_loss,valid_loss,l0_penalty,lr\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:.6},{},{},{:.8}\n",
                r.step,
                r.train_loss,
                opt(r.valid_loss),
                opt(r.l0_penalty),
                r.lr
            ));
        }
        s
    }
}

/// Mean per-token label-smoothed loss over a pair set.
pub fn evaluate_loss<S: Scalar>(m: &Model<S>, pairs: &[Pair], eps_ls: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (src, tgt) in pairs {
        let mut tape = Tape::new();
        let (loss, n) = sentence_loss(m, &mut tape, src, tgt, S::from_f64(eps_ls), None)?;
        total += tape.value(loss).item().as_f64() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Train("empty evaluation set".to_string()));
    }
    Ok(total / tokens as f64)
}

/// Fraction of pairs whose greedy decode reproduces the reference, plus
/// token accuracy over aligned positions.
pub fn exact_match<S: Scalar>(m: &Model<S>, pairs: &[Pair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Train("empty evaluation set".to_string()));
    }
    let mut exact = 0usize;
    let mut tok_hits = 0usize;
    let mut tok_total = 0usize;
    for (src, tgt) in pairs {
        let max_len = (tgt.len() + 8).min(m.config.max_len);
        let hyp = greedy_decode(m, src, max_len)?;
        if hyp.tokens == *tgt {
            exact += 1;
        }
        tok_total += tgt.len();
        tok_hits += hyp
            .tokens
            .iter()
            .zip(tgt)
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok((
        exact as f64 / pairs.len() as f64,
        tok_hits as f64 / tok_total.max(1) as f64,
    ))
}

fn collect_params<S: Scalar>(m: &Model<S>) -> Vec<(ParamId, Tensor<S>)> {
    m.store
        .iter()
        .map(|(id, _, t)| (id, t.clone()))
        .collect()
}

struct GateBinding {
    id: ParamId,
    group: GateGroup,
}

#[derive(Clone, Copy)]
enum GateGroup {
    EncSelf(usize, usize),
    EncDec(usize, usize),
    DecSelf(usize, usize),
}

fn gate_bindings<S: Scalar>(m: &Model<S>, gates: &GateSet) -> Vec<GateBinding> {
    let base = m.store.len();
    let mut out = Vec::new();
    let mut k = 0usize;
    let mut push = |group: GateGroup, k: &mut usize| {
        out.push(GateBinding {
            id: ParamId(base + *k),
            group,
        });
        *k += 1;
    };
    for (l, gs) in gates.enc_self.iter().enumerate() {
        for h in 0..gs.len() {
            push(GateGroup::EncSelf(l, h), &mut k);
        }
    }
    for (l, gs) in gates.enc_dec.iter().enumerate() {
        for h in 0..gs.len() {
            push(GateGroup::EncDec(l, h), &mut k);
        }
    }
    for (l, gs) in gates.dec_self.iter().enumerate() {
        if let Some(gs) = gs {
            for h in 0..gs.len() {
                push(GateGroup::DecSelf(l, h), &mut k);
            }
        }
    }
    out
}

fn gate_value(gates: &GateSet, group: GateGroup) -> f64 {
    match group {
        GateGroup::EncSelf(l, h) => gates.enc_self[l][h].log_alpha,
        GateGroup::EncDec(l, h) => gates.enc_dec[l][h].log_alpha,
        GateGroup::DecSelf(l, h) => gates.dec_self[l].as_ref().unwrap()[h].log_alpha,
    }
}

fn set_gate_value(gates: &mut GateSet, group: GateGroup, v: f64) {
    match group {
        GateGroup::EncSelf(l, h) => gates.enc_self[l][h].log_alpha = v,
        GateGroup::EncDec(l, h) => gates.enc_dec[l][h].log_alpha = v,
        GateGroup::DecSelf(l, h) => gates.dec_self[l].as_mut().unwrap()[h].log_alpha = v,
    }
}

/// Builds tape variables for sampled gates, one fresh uniform draw per
/// gate per batch (the `draws` slice), aligned with `gate_bindings`.
fn gate_vars_on_tape<S: Scalar>(
    m: &Model<S>,
    tape: &mut Tape<S>,
    gates: &GateSet,
    bindings: &[GateBinding],
    draws: &[f64],
) -> Result<(GateVars, Vec<Var>)> {
    let mut gv = GateVars {
        enc_self: m.encoder.iter().map(|l| Some(Vec::with_capacity(l.self_attn.heads))).collect(),
        enc_dec: m.decoder.iter().map(|l| Some(Vec::with_capacity(l.cross.heads))).collect(),
        dec_self: m
            .decoder
            .iter()
            .map(|l| match &l.mixer {
                Mixer::Mhsa(b) => Some(Vec::with_capacity(b.heads)),
                _ => None,
            })
            .collect(),
    };
    let mut raw = Vec::with_capacity(bindings.len());
    for (b, &u) in bindings.iter().zip(draws) {
        let la = gate_value(gates, b.group);
        let p = tape.param(b.id, &Tensor::scalar(S::from_f64(la)));
        raw.push(p);
        let sampled = tape.hard_concrete_sample(p, u, GAMMA, ZETA, BETA_TEMP)?;
        match b.group {
            GateGroup::EncSelf(l, _) => gv.enc_self[l].as_mut().unwrap().push(sampled),
            GateGroup::EncDec(l, _) => gv.enc_dec[l].as_mut().unwrap().push(sampled),
            GateGroup::DecSelf(l, _) => gv.dec_self[l].as_mut().unwrap().push(sampled),
        }
    }
    Ok((gv, raw))
}

struct TrainDriver<'a, S: Scalar> {
    model: &'a mut Model<S>,
    cfg: &'a TrainingConfig,
    gates: Option<&'a mut GateSet>,
    bindings: Vec<GateBinding>,
}

impl<'a, S: Scalar> TrainDriver<'a, S> {
    fn run(&mut self, data: &Dataset) -> Result<TrainLog> {
        self.cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::Train("empty training set".to_string()));
        }
        if let Some(g) = &self.gates {
            g.validate_for(self.model)?;
        }
        let mut all_params: Vec<(ParamId, Tensor<S>)> = collect_params(self.model);
        if let Some(g) = &self.gates {
            for b in &self.bindings {
                all_params.push((b.id, Tensor::scalar(S::from_f64(gate_value(g, b.group)))));
            }
        }
        let refs: Vec<(ParamId, &Tensor<S>)> =
            all_params.iter().map(|(id, t)| (*id, t)).collect();
        let mut adam = AdamState::new(&refs);
        if self.gates.is_some() {
            for i in self.model.store.len()..refs.len() {
                adam.set_lr_scale(i, self.cfg.gate_lr_mult);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut cursor = order.len(); // force a shuffle before first use
        let mut log = TrainLog::default();
        let eps_ls = S::from_f64(self.cfg.eps_ls);

        for step in 1..=self.cfg.max_updates {
            // assemble one batch by target-token budget
            let mut batch: Vec<&Pair> = Vec::new();
            let mut tokens = 0usize;
            while tokens < self.cfg.batch_tokens {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let p = &data.train[order[cursor]];
                cursor += 1;
                tokens += p.1.len() + 1;
                batch.push(p);
            }
            let draws: Vec<f64> = self
                .bindings
                .iter()
                .map(|_| rng.gen_range(1e-9..1.0 - 1e-9))
                .collect();

            let mut total = GradMap::new();
            let mut loss_sum = 0.0f64;
            for (src, tgt) in batch {
                let mut tape = Tape::new();
                let gv = match &self.gates {
                    Some(g) => Some(
                        gate_vars_on_tape(self.model, &mut tape, g, &self.bindings, &draws)?.0,
                    ),
                    None => None,
                };
                let (loss, n) = sentence_loss(self.model, &mut tape, src, tgt, eps_ls, gv.as_ref())?;
                let lv = tape.value(loss).item().as_f64();
                if !lv.is_finite() {
                    return Err(Error::Train(format!("loss diverged at step {step}")));
                }
                loss_sum += lv * n as f64;
                let grads = tape.backward(loss)?;
                total.accumulate(&grads, S::from_f64(n as f64 / tokens as f64))?;
            }
            let train_loss = loss_sum / tokens as f64;

            let mut l0 = None;
            if let Some(g) = &self.gates {
                // L0 penalty gradient on its own small tape, weighted by
                // lambda in the combined objective
                let mut tape = Tape::new();
                let mut sum: Option<Var> = None;
                for b in &self.bindings {
                    let p = tape.param(b.id, &Tensor::scalar(S::from_f64(gate_value(g, b.group))));
                    let nz = tape.hard_concrete_nonzero(p, GAMMA, ZETA, BETA_TEMP);
                    sum = Some(match sum {
                        None => nz,
                        Some(s) => tape.add(s, nz)?,
                    });
                }
                if let Some(s) = sum {
                    l0 = Some(tape.value(s).item().as_f64());
                    if self.cfg.lambda > 0.0 {
                        let grads = tape.backward(s)?;
                        total.accumulate(&grads, S::from_f64(self.cfg.lambda))?;
                    }
                }
            }

            let lr = lr_at(step, self.cfg);
            let current: Vec<Tensor<S>> = all_params.iter().map(|(_, t)| t.clone()).collect();
            let updated = adam.step(&current, &total, lr, self.cfg)?;
            for ((id, slot), new) in all_params.iter_mut().zip(updated) {
                if id.0 < self.model.store.len() {
                    self.model.store.set(*id, new.clone());
                }
                *slot = new;
            }
            if let Some(g) = &mut self.gates {
                let base = self.model.store.len();
                for b in &self.bindings {
                    let v = all_params[base + (b.id.0 - base)].1.item().as_f64();
                    set_gate_value(g, b.group, v);
                }
            }

            let eval_now = step % self.cfg.eval_interval == 0 || step == self.cfg.max_updates;
            let valid_loss = if eval_now && !data.valid.is_empty() {
                Some(evaluate_loss(self.model, &data.valid, self.cfg.eps_ls)?)
            } else {
                None
            };
            log.rows.push(LogRow {
                step,
                train_loss,
                valid_loss,
                l0_penalty: l0,
                lr,
            });
        }
        Ok(log)
    }
}

/// Standard training with the plain label-smoothed objective.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset,
    cfg: &TrainingConfig,
) -> Result<TrainLog> {
    TrainDriver {
        model,
        cfg,
        gates: None,
        bindings: Vec::new(),
    }
    .run(data)
}

/// Joint fine-tuning of weights and head gates under the combined
/// objective; the gate set is updated in place.
pub fn finetune_gates<S: Scalar>(
    model: &mut Model<S>,
    gates: &mut GateSet,
    data: &Dataset,
    cfg: &TrainingConfig,
) -> Result<TrainLog> {
    let bindings = gate_bindings(model, gates);
    TrainDriver {
        model,
        cfg,
        gates: Some(gates),
        bindings,
    }
    .run(data)
}

/// Sequence-level distillation: pairs each source with the teacher's
/// beam-search output.
pub fn distill_dataset<S: Scalar>(
    teacher: &Model<S>,
    sources: &[Vec<u32>],
    beam: &BeamConfig,
) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(sources.len());
    for src in sources {
        let hyps = beam_search(teacher, src, beam)?;
        out.push((src.clone(), hyps[0].tokens.clone()));
    }
    Ok(out)
}
