//! Acceptance suite: correctness properties plus desk-scale quality and
//! speed analogues, printed as one pass/fail line per criterion.
//!
//! Everything runs inside a single #[test] so the wall-clock sensitive
//! criteria (fused-kernel timing, words-per-second ladder) are not
//! polluted by parallel test threads.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deskmt::bench::{measure_wps, BenchConfig};
use deskmt::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TrainState};
use deskmt::decode::{beam_search, exhaustive_search, BeamConfig};
use deskmt::graph::{finite_diff_check, ParamId, Tape, Var};
use deskmt::model::forward::{sentence_loss, teacher_forced_logits, GateVars, BOS, EOS};
use deskmt::model::infer::{decoder_step, encode, init_decode_state};
use deskmt::model::layers::ssru_step;
use deskmt::model::{build_model, DecoderKind, Mixer, Model, ModelConfig};
use deskmt::pruning::{
    finalize_prune, head_report, with_deterministic_gates, GateSet, HardConcreteGate, BETA_TEMP,
    GAMMA, ZETA,
};
use deskmt::tensor::{macs, Tensor};
use deskmt::training::{
    exact_match, finetune_gates, generate_task_data, train, Dataset, TaskKind, TaskSpec,
    TrainingConfig,
};

fn cfgm(
    kind: DecoderKind,
    enc: usize,
    dec: usize,
    d: usize,
    heads: usize,
    ffn: usize,
    vocab: usize,
    decoder_ffn: bool,
    max_len: usize,
) -> ModelConfig {
    ModelConfig {
        enc_layers: enc,
        dec_layers: dec,
        d_model: d,
        n_heads: heads,
        d_ffn: ffn,
        src_vocab: vocab,
        tgt_vocab: vocab,
        decoder_kind: kind,
        decoder_ffn,
        aan_gating: false,
        max_len,
        head_layout: None,
    }
}

fn train_cfg(updates: usize, peak_lr: f64, batch: usize, seed: u64) -> TrainingConfig {
    TrainingConfig {
        peak_lr,
        warmup_steps: 100,
        adam_beta1: 0.9,
        adam_beta2: 0.98,
        adam_eps: 1e-9,
        eps_ls: 0.1,
        batch_tokens: batch,
        max_updates: updates,
        eval_interval: updates,
        lambda: 0.0,
        gate_lr_mult: 25.0,
        seed,
    }
}

/// 1. Incremental decoding reproduces the teacher-forced forward for
/// every decoder kind on random models and inputs.
fn c1_equivalence() -> String {
    let start = Instant::now();
    let kinds = [
        DecoderKind::Mhsa,
        DecoderKind::Ssru,
        DecoderKind::SsruFused,
        DecoderKind::Aan,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f32;
    for i in 0..100usize {
        let d = *[8usize, 16].get(rng.gen_range(0..2)).unwrap();
        let heads = *[1usize, 2, 4].get(rng.gen_range(0..3)).unwrap();
        let vocab = rng.gen_range(8..16usize);
        let mut config = cfgm(
            kinds[i % kinds.len()],
            rng.gen_range(1..=2),
            rng.gen_range(1..=2),
            d,
            heads,
            rng.gen_range(8..=24),
            vocab,
            i % 2 == 0,
            40,
        );
        config.aan_gating = i % 3 == 0;
        let m = build_model::<f32>(&config, 1000 + i as u64).unwrap();
        let src: Vec<u32> = (0..rng.gen_range(1..=8))
            .map(|_| rng.gen_range(4..vocab as u32))
            .collect();
        let t = rng.gen_range(1..=32usize);
        let mut tgt_in = vec![BOS];
        tgt_in.extend((1..t).map(|_| rng.gen_range(4..vocab as u32)));

        let mut tape = Tape::new();
        let node = teacher_forced_logits(&m, &mut tape, &src, &tgt_in, None).unwrap();
        let full = tape.value(node).clone();

        let memory = encode(&m, &src, None).unwrap();
        let mut state = init_decode_state(&m, &memory, None).unwrap();
        for (pos, &y) in tgt_in.iter().enumerate() {
            let row = decoder_step(&m, &mut state, y).unwrap();
            for (a, b) in row.data().iter().zip(full.row(pos)) {
                let diff = (a - b).abs();
                worst = worst.max(diff);
                assert!(
                    diff <= 1e-5,
                    "model {i} ({:?}) pos {pos}: |Δlogit| = {diff:e}",
                    config.decoder_kind
                );
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "equivalence suite took {secs:.1}s (limit 60s)");
    format!("max |Δlogit| {worst:.1e} over 100 random models, {secs:.1}s")
}

/// Builds tape gate variables (one hard-concrete sample per attention
/// head) plus the per-head L0 terms, reading log-alphas from `vals`
/// starting at parameter id `base`.
fn gates_on_tape(
    m: &Model<f64>,
    tape: &mut Tape<f64>,
    vals: &[Tensor<f64>],
    us: &[f64],
    base: usize,
) -> (GateVars, Vec<Var>) {
    let mut gv = GateVars::default();
    let mut nonzero = Vec::new();
    let mut k = 0usize;
    let mut block = |tape: &mut Tape<f64>, heads: usize, k: &mut usize| -> Option<Vec<Var>> {
        let mut vars = Vec::with_capacity(heads);
        for _ in 0..heads {
            let p = tape.param(ParamId(base + *k), &vals[*k]);
            let g = tape
                .hard_concrete_sample(p, us[*k % us.len()], GAMMA, ZETA, BETA_TEMP)
                .unwrap();
            nonzero.push(tape.hard_concrete_nonzero(p, GAMMA, ZETA, BETA_TEMP));
            vars.push(g);
            *k += 1;
        }
        Some(vars)
    };
    for layer in &m.encoder {
        gv.enc_self.push(block(tape, layer.self_attn.heads, &mut k));
    }
    for layer in &m.decoder {
        gv.enc_dec.push(block(tape, layer.cross.heads, &mut k));
        gv.dec_self.push(match &layer.mixer {
            Mixer::Mhsa(b) => block(tape, b.heads, &mut k),
            _ => None,
        });
    }
    (gv, nonzero)
}

/// 2. Full-model finite-difference gradient check in f64 for every
/// decoder kind, including sampled head gates and the L0 penalty term.
fn c2_gradients() -> String {
    let start = Instant::now();
    let lambda = 0.7;
    let src = [4u32, 5, 6, 7];
    let tgt = [5u32, 4, 6];
    let alphas = [-0.5, 0.2, 0.8];
    let us = [0.4, 0.5, 0.6];
    let mut worst = 0.0f64;
    for (ci, (kind, gating)) in [
        (DecoderKind::Mhsa, false),
        (DecoderKind::Ssru, false),
        (DecoderKind::SsruFused, false),
        (DecoderKind::Aan, true),
    ]
    .into_iter()
    .enumerate()
    {
        let mut config = cfgm(kind, 1, 1, 8, 2, 8, 9, true, 16);
        config.aan_gating = gating;
        let m = build_model::<f64>(&config, 40 + ci as u64).unwrap();
        let n = m.store.len();
        let n_gates = m.encoder.iter().map(|l| l.self_attn.heads).sum::<usize>()
            + m.decoder
                .iter()
                .map(|l| {
                    l.cross.heads
                        + match &l.mixer {
                            Mixer::Mhsa(b) => b.heads,
                            _ => 0,
                        }
                })
                .sum::<usize>();

        let mut params: Vec<Tensor<f64>> = m.store.iter().map(|(_, _, t)| t.clone()).collect();
        for g in 0..n_gates {
            params.push(Tensor::scalar(alphas[g % alphas.len()]));
        }

        let loss_of = |ps: &[Tensor<f64>], tape: &mut Tape<f64>| -> Var {
            let mut mm = m.clone();
            for i in 0..n {
                mm.store.set(ParamId(i), ps[i].clone());
            }
            let (gv, nonzero) = gates_on_tape(&mm, tape, &ps[n..], &us, n);
            let (xent, _) = sentence_loss(&mm, tape, &src, &tgt, 0.1, Some(&gv)).unwrap();
            let mut pen = nonzero[0];
            for &v in &nonzero[1..] {
                pen = tape.add(pen, v).unwrap();
            }
            let pen = tape.scale(pen, lambda);
            tape.add(xent, pen).unwrap()
        };

        let mut tape = Tape::new();
        let total = loss_of(&params, &mut tape);
        let grads = tape.backward(total).unwrap();
        let analytic: Vec<Tensor<f64>> = (0..params.len())
            .map(|i| {
                grads
                    .get(ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(params[i].shape().to_vec()))
            })
            .collect();
        let err = finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let l = loss_of(ps, &mut t);
                t.value(l).item()
            },
            &params,
            &analytic,
            3e-5,
        );
        worst = worst.max(err);
        assert!(err < 1e-4, "{kind:?}: max relative error {err:e}");
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient suite took {secs:.1}s (limit 120s)");
    format!("max relative error {worst:.1e} across 4 decoder kinds, {secs:.1}s")
}

/// 3. The fused SSRU parameterization matches the split one numerically
/// and is at least as fast on chained single-token steps.
fn c3_fused_ssru() -> String {
    let d = 32usize;
    let split = build_model::<f32>(&cfgm(DecoderKind::Ssru, 1, 1, d, 2, 32, 10, true, 32), 77)
        .unwrap();
    let fused = split.with_ssru_fusion(true).unwrap();
    let Mixer::Ssru(ls) = &split.decoder[0].mixer else {
        panic!("expected SSRU mixer");
    };
    let Mixer::Ssru(lf) = &fused.decoder[0].mixer else {
        panic!("expected SSRU mixer");
    };

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f32;
    for step in 0..1000 {
        let x = Tensor::from_vec(
            vec![1, d],
            (0..d).map(|_| rng.gen_range(-2.0..2.0f32)).collect(),
        )
        .unwrap();
        let c = Tensor::from_vec(
            vec![1, d],
            (0..d).map(|_| rng.gen_range(-2.0..2.0f32)).collect(),
        )
        .unwrap();
        let (o_s, c_s) = ssru_step(ls, &split.store, &x, &c).unwrap();
        let (o_f, c_f) = ssru_step(lf, &fused.store, &x, &c).unwrap();
        for (a, b) in o_s
            .data()
            .iter()
            .chain(c_s.data())
            .zip(o_f.data().iter().chain(c_f.data()))
        {
            let diff = (a - b).abs();
            worst = worst.max(diff);
            assert!(diff <= 1e-6, "step {step}: |Δ| = {diff:e}");
        }
    }

    // timing: chained steps through each kernel, best of interleaved
    // trials to shrug off scheduler noise
    let x = Tensor::from_vec(vec![1, d], (0..d).map(|i| (i as f32 * 0.37).sin()).collect())
        .unwrap();
    let steps = 30_000usize;
    let mut best = [f64::INFINITY; 2];
    for _trial in 0..7 {
        for (which, (layer, model)) in [(ls, &split), (lf, &fused)].iter().enumerate() {
            let mut c = Tensor::zeros(vec![1, d]);
            let t0 = Instant::now();
            for _ in 0..steps {
                let (_, c_next) = ssru_step(layer, &model.store, &x, &c).unwrap();
                c = c_next;
            }
            best[which] = best[which].min(t0.elapsed().as_secs_f64());
        }
    }
    let wps_split = steps as f64 / best[0];
    let wps_fused = steps as f64 / best[1];
    assert!(
        wps_fused >= wps_split,
        "fused {wps_fused:.0} steps/s < split {wps_split:.0} steps/s"
    );
    format!(
        "max |Δ| {worst:.1e}; fused {wps_fused:.0} vs split {wps_split:.0} steps/s (+{:.1}%)",
        (wps_fused / wps_split - 1.0) * 100.0
    )
}

/// 4. Monte-Carlo zero-probability of the hard-concrete gate matches
/// the closed form within three standard errors.
fn c4_hard_concrete() -> String {
    let n = 1_000_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_z = 0.0f64;
    for log_alpha in [-4.0, -1.0, 0.0, 1.0, 4.0] {
        let gate = HardConcreteGate::new(log_alpha);
        let p0 = gate.prob_zero();
        let mut zeros = 0usize;
        for _ in 0..n {
            let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
            if gate.sample_gate(u).unwrap() == 0.0 {
                zeros += 1;
            }
        }
        let p_hat = zeros as f64 / n as f64;
        let se = (p0 * (1.0 - p0) / n as f64).sqrt();
        let z = (p_hat - p0).abs() / se;
        worst_z = worst_z.max(z);
        assert!(
            z <= 3.0,
            "log_alpha {log_alpha}: empirical {p_hat:.5} vs closed-form {p0:.5} is {z:.2} SE"
        );
    }
    format!("worst deviation {worst_z:.2} SE at 1e6 draws per log-alpha")
}

/// 5. With gates forced to exactly 0 or 1, physically pruning heads
/// reproduces the gated model, and pruning is idempotent.
fn c5_prune_equivalence() -> String {
    let m = build_model::<f32>(&cfgm(DecoderKind::Mhsa, 2, 2, 16, 4, 24, 12, true, 32), 55)
        .unwrap();
    let mut gates = GateSet::fresh_for(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for g in gates.iter_mut() {
        g.log_alpha = if rng.gen_bool(0.5) { 50.0 } else { -50.0 };
    }
    let gated = with_deterministic_gates(&m, &gates).unwrap();
    let pruned = finalize_prune(&m, &gates, 0.0).unwrap();
    assert!(pruned.param_count() < m.param_count(), "nothing was pruned");

    let mut worst = 0.0f32;
    for s in 0..5u64 {
        let mut rs = ChaCha8Rng::seed_from_u64(s);
        let src: Vec<u32> = (0..4).map(|_| rs.gen_range(4..12)).collect();
        let tgt_in: Vec<u32> = std::iter::once(BOS)
            .chain((0..3).map(|_| rs.gen_range(4..12)))
            .collect();
        let row = |mm: &Model<f32>| {
            let mut tape = Tape::new();
            let l = teacher_forced_logits(mm, &mut tape, &src, &tgt_in, None).unwrap();
            tape.value(l).data().to_vec()
        };
        for (a, b) in row(&gated).iter().zip(row(&pruned)) {
            let diff = (a - b).abs();
            worst = worst.max(diff);
            assert!(diff <= 1e-5, "sentence {s}: |Δlogit| = {diff:e}");
        }
    }

    // pruning again with fully open gates must change nothing
    let mut open = GateSet::fresh_for(&pruned);
    for g in open.iter_mut() {
        g.log_alpha = 50.0;
    }
    let again = finalize_prune(&pruned, &open, 0.0).unwrap();
    assert_eq!(again.config, pruned.config, "config changed on re-prune");
    for ((_, na, ta), (_, nb, tb)) in pruned.store.iter().zip(again.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "parameter {na} changed on re-prune");
    }
    format!(
        "max |Δlogit| {worst:.1e}; heads {} -> {}, idempotent",
        GateSet::fresh_for(&m).total_heads(),
        head_report(&pruned)
    )
}

fn toy_grammar_data() -> Dataset {
    generate_task_data(&TaskSpec {
        kind: TaskKind::ToyGrammarTranslation,
        vocab: 14,
        min_len: 3,
        max_len: 6,
        train_size: 1200,
        valid_size: 100,
        test_size: 64,
        seed: 12,
    })
    .unwrap()
}

/// 6. Both the 6-6 attention baseline and the 12-1 SSRU model without
/// decoder FFN learn the toy grammar task to >= 99% exact match.
fn c6_quality() -> String {
    let start = Instant::now();
    let data = toy_grammar_data();
    let mut results = Vec::new();
    for (name, config, seed) in [
        (
            "6-6 MHSA",
            cfgm(DecoderKind::Mhsa, 6, 6, 32, 4, 64, 14, true, 32),
            11u64,
        ),
        (
            "12-1 SSRU no-FFN",
            cfgm(DecoderKind::Ssru, 12, 1, 32, 4, 64, 14, false, 32),
            21,
        ),
    ] {
        let mut m =
            build_model::<f32>(&config, seed.wrapping_add(0x6d6f64656c)).unwrap();
        let mut cfg = train_cfg(1500, 0.004, 384, seed);
        cfg.eval_interval = 500;
        train(&mut m, &data, &cfg).unwrap();
        let (em, _) = exact_match(&m, &data.valid).unwrap();
        assert!(em >= 0.99, "{name}: exact match {:.1}% < 99%", em * 100.0);
        results.push(format!("{name} {:.1}%", em * 100.0));
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 900.0, "training took {secs:.0}s (limit 15 min)");
    format!("{}; {secs:.0}s total", results.join(", "))
}

/// 7. Words-per-second ladder at batch 1, beam 5, forced generation
/// length 128: each decoder simplification is faster than the previous
/// one and the full stack clears 1.3x the attention baseline.
fn c7_speed() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let sources: Vec<Vec<u32>> = (0..64)
        .map(|_| (0..8).map(|_| rng.gen_range(4..16u32)).collect())
        .collect();
    let bench = BenchConfig {
        batch_size: 1,
        repeats: 10,
        warmup_runs: 2,
        beam: BeamConfig {
            beam_width: 5,
            max_len: 128,
            alpha: 1.0,
            min_len: 128,
        },
    };
    let variants = [
        ("baseline", cfgm(DecoderKind::Mhsa, 6, 6, 32, 4, 64, 16, true, 140)),
        ("ssru", cfgm(DecoderKind::SsruFused, 6, 6, 32, 4, 64, 16, true, 140)),
        ("+no-ffn", cfgm(DecoderKind::SsruFused, 6, 6, 32, 4, 64, 16, false, 140)),
        ("+12-1", cfgm(DecoderKind::SsruFused, 12, 1, 32, 4, 64, 16, false, 140)),
    ];
    let mut rows = Vec::new();
    for (name, config) in &variants {
        let m = build_model::<f32>(config, 7).unwrap();
        let stats = measure_wps(&m, &sources, &bench).unwrap();
        assert_eq!(stats.tokens_per_run, 64 * 128, "{name}: unexpected token count");
        let rel = stats.std / stats.mean;
        assert!(rel < 0.10, "{name}: wps std/mean {rel:.3} >= 10%");
        rows.push((*name, stats.mean));
    }
    for w in rows.windows(2) {
        assert!(
            w[1].1 > w[0].1,
            "ordering violated: {} {:.0} wps !< {} {:.0} wps",
            w[0].0,
            w[0].1,
            w[1].0,
            w[1].1
        );
    }
    let speedup = rows[3].1 / rows[0].1;
    assert!(
        speedup >= 1.3,
        "full stack speedup {speedup:.2}x < 1.3x baseline"
    );
    let secs = start.elapsed().as_secs_f64();
    format!(
        "{}; full stack {speedup:.2}x baseline, {secs:.0}s",
        rows.iter()
            .map(|(n, w)| format!("{n} {w:.0} wps"))
            .collect::<Vec<_>>()
            .join(" < ")
    )
}

/// 8. Some penalty weight in a small sweep removes at least half the
/// encoder self-attention heads at <= 1 point exact-match cost.
fn c8_pruning_sweep() -> String {
    let start = Instant::now();
    let data = generate_task_data(&TaskSpec {
        kind: TaskKind::Copy,
        vocab: 12,
        min_len: 3,
        max_len: 8,
        train_size: 600,
        valid_size: 100,
        test_size: 50,
        seed: 5,
    })
    .unwrap();
    let config = cfgm(DecoderKind::Ssru, 2, 1, 32, 4, 64, 12, true, 32);
    let mut base = build_model::<f32>(&config, 9).unwrap();
    train(&mut base, &data, &train_cfg(800, 5e-3, 256, 13)).unwrap();
    let (base_em, _) = exact_match(&base, &data.valid).unwrap();
    assert!(base_em >= 0.98, "base model underfit: {:.1}%", base_em * 100.0);
    let enc_total = base.encoder.iter().map(|l| l.self_attn.heads).sum::<usize>();

    let mut found = None;
    let mut tried = Vec::new();
    for lambda in [0.05, 0.15, 0.4] {
        let mut m = base.clone();
        let mut gates = GateSet::fresh_for(&m);
        let mut cfg = train_cfg(400, 2e-3, 256, 17);
        cfg.warmup_steps = 50;
        cfg.lambda = lambda;
        finetune_gates(&mut m, &mut gates, &data, &cfg).unwrap();
        let mut pruned = finalize_prune(&m, &gates, 0.0).unwrap();
        // brief recovery training on the reduced architecture
        let mut rec = train_cfg(200, 1e-3, 256, 19);
        rec.warmup_steps = 50;
        train(&mut pruned, &data, &rec).unwrap();
        let (em, _) = exact_match(&pruned, &data.valid).unwrap();
        let report = head_report(&pruned);
        let removed = enc_total - report.enc;
        tried.push(format!(
            "lambda {lambda}: heads {report}, em {:.1}%",
            em * 100.0
        ));
        if removed * 2 >= enc_total && base_em - em <= 0.01 + 1e-9 && found.is_none() {
            found = Some((lambda, report, em));
        }
    }
    let (lambda, report, em) = found.unwrap_or_else(|| {
        panic!(
            "no lambda removed >= {}/{enc_total} encoder heads within 1 point of {:.1}%: {}",
            enc_total / 2,
            base_em * 100.0,
            tried.join("; ")
        )
    });
    let secs = start.elapsed().as_secs_f64();
    format!(
        "lambda {lambda}: heads {report}, em {:.1}% (base {:.1}%), {secs:.0}s",
        em * 100.0,
        base_em * 100.0
    )
}

/// 9. Instrumented multiply-accumulate counts per decoder step: exactly
/// constant for SSRU and AAN, strictly increasing for cached attention.
fn c9_complexity() -> String {
    let mut note = Vec::new();
    for kind in [DecoderKind::Ssru, DecoderKind::Aan, DecoderKind::Mhsa] {
        let m = build_model::<f32>(&cfgm(kind, 2, 2, 16, 2, 24, 12, true, 64), 33).unwrap();
        let memory = encode(&m, &[4, 5, 6, 7], None).unwrap();
        let mut state = init_decode_state(&m, &memory, None).unwrap();
        let mut counts = Vec::new();
        for step in 0..24u32 {
            macs::reset();
            decoder_step(&m, &mut state, 4 + (step % 8)).unwrap();
            counts.push(macs::count());
        }
        match kind {
            DecoderKind::Mhsa => {
                for w in counts.windows(2) {
                    assert!(w[1] > w[0], "MHSA MACs not strictly increasing: {counts:?}");
                }
                note.push(format!("MHSA {}..{}", counts[0], counts[23]));
            }
            _ => {
                assert!(
                    counts.iter().all(|&c| c == counts[0]),
                    "{kind:?} MACs vary across steps: {counts:?}"
                );
                note.push(format!("{kind:?} {}", counts[0]));
            }
        }
    }
    format!("MACs/step {}", note.join(", "))
}

/// 10. On tiny vocabularies the beam finds the exhaustive optimum, and
/// width-1 beam search is plain greedy decoding.
fn c10_beam_oracle() -> String {
    let start = Instant::now();
    let kinds = [DecoderKind::Mhsa, DecoderKind::Ssru, DecoderKind::Aan];
    // every source over data tokens {4, 5} with length 1..=3
    let mut all_sources = Vec::new();
    for len in 1..=3u32 {
        for code in 0..(1u32 << len) {
            all_sources.push((0..len).map(|b| 4 + ((code >> b) & 1)).collect::<Vec<u32>>());
        }
    }
    let beam5 = BeamConfig {
        beam_width: 5,
        max_len: 5,
        alpha: 0.0,
        min_len: 0,
    };
    let mut matches = 0usize;
    let mut total = 0usize;
    for mi in 0..40u64 {
        let data = generate_task_data(&TaskSpec {
            kind: TaskKind::Copy,
            vocab: 6,
            min_len: 1,
            max_len: 3,
            train_size: 10,
            valid_size: 2,
            test_size: 2,
            seed: mi,
        })
        .unwrap();
        let config = cfgm(kinds[mi as usize % kinds.len()], 1, 1, 16, 2, 16, 6, true, 16);
        let mut m = build_model::<f32>(&config, 2000 + mi).unwrap();
        let mut cfg = train_cfg(150, 5e-3, 64, mi);
        cfg.warmup_steps = 20;
        train(&mut m, &data, &cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9000 + mi);
        for _ in 0..5 {
            let src = &all_sources[rng.gen_range(0..all_sources.len())];
            let best = &beam_search(&m, src, &beam5).unwrap()[0];
            let opt = &exhaustive_search(&m, src, 5).unwrap()[0];
            total += 1;
            if (best.score - opt.score).abs() <= 1e-6 {
                matches += 1;
            }

            // independent greedy reference: argmax token per step
            let memory = encode(&m, src, None).unwrap();
            let mut state = init_decode_state(&m, &memory, None).unwrap();
            let mut tokens = Vec::new();
            let mut last = BOS;
            for _ in 0..5 {
                let row = decoder_step(&m, &mut state, last).unwrap();
                let arg = row
                    .data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .unwrap()
                    .0 as u32;
                if arg == EOS {
                    break;
                }
                tokens.push(arg);
                last = arg;
            }
            let mut b1 = beam5;
            b1.beam_width = 1;
            let beam1 = &beam_search(&m, src, &b1).unwrap()[0];
            assert_eq!(beam1.tokens, tokens, "beam-1 differs from greedy on {src:?}");
        }
    }
    let rate = matches as f64 / total as f64;
    assert!(
        rate >= 0.95,
        "beam-5 matched the exhaustive optimum on only {matches}/{total} instances"
    );
    format!(
        "beam-5 optimal on {matches}/{total}, beam-1 == greedy on all, {:.0}s",
        start.elapsed().as_secs_f64()
    )
}

/// 11. Checkpoints round-trip bitwise and the `reproduce` pipeline runs
/// end to end, emitting the three analogue tables.
fn c11_infrastructure() -> String {
    let start = Instant::now();
    let m = build_model::<f32>(&cfgm(DecoderKind::Mhsa, 2, 2, 16, 2, 24, 12, true, 32), 3)
        .unwrap();
    let moments: Vec<_> = m
        .store
        .iter()
        .map(|(_, name, t)| {
            (
                name.to_string(),
                Tensor::zeros(t.shape().to_vec()),
                Tensor::zeros(t.shape().to_vec()),
            )
        })
        .collect();
    let gates = GateSet::fresh_for(&m);
    let ckpt = Checkpoint {
        model: m,
        gates: Some(gates),
        train_state: Some(TrainState { step: 7, moments }),
    };
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &ckpt).unwrap();
    let back = read_checkpoint(bytes.as_slice()).unwrap();
    let mut bytes2 = Vec::new();
    write_checkpoint(&mut bytes2, &back).unwrap();
    assert_eq!(bytes, bytes2, "checkpoint round-trip is not bitwise");

    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "model": {
            "enc_layers": 2, "dec_layers": 2, "d_model": 16, "n_heads": 2,
            "d_ffn": 24, "src_vocab": 12, "tgt_vocab": 12,
            "decoder_kind": "Mhsa", "max_len": 32
        },
        "training": {
            "max_updates": 60, "warmup_steps": 20, "peak_lr": 0.003,
            "batch_tokens": 128, "eval_interval": 30, "seed": 6
        },
        "task": {
            "kind": "copy", "vocab": 12, "min_len": 3, "max_len": 6,
            "train_size": 120, "valid_size": 30, "test_size": 20, "seed": 7
        },
        "bench": {
            "repeats": 2, "warmup_runs": 1,
            "beam": {"beam_width": 2, "max_len": 16}
        }
    });
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_deskmt"))
        .args(["reproduce", "--config"])
        .arg(&cfg_path)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "reproduce failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let t13 = std::fs::read_to_string(out_dir.join("table1_table3.csv")).unwrap();
    assert!(t13.starts_with("config_name,wps_mean,"), "bad ladder CSV header");
    assert!(t13.contains("deep_shallow"), "ladder CSV missing variants");
    let t2 = std::fs::read_to_string(out_dir.join("table2.csv")).unwrap();
    assert!(t2.starts_with("config_name,heads_enc,"), "bad pruning CSV header");
    for f in ["baseline.ckpt", "pruned.ckpt", "distilled.tsv", "table1_table3.txt"] {
        assert!(out_dir.join(f).exists(), "reproduce did not write {f}");
    }
    format!(
        "bitwise checkpoint ({} bytes); reproduce pipeline ok, {:.0}s",
        bytes.len(),
        start.elapsed().as_secs_f64()
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<(usize, &str, fn() -> String)> = vec![
        (1, "incremental = teacher-forced", c1_equivalence),
        (2, "gradient checks", c2_gradients),
        (3, "fused SSRU", c3_fused_ssru),
        (4, "hard-concrete statistics", c4_hard_concrete),
        (5, "prune equivalence", c5_prune_equivalence),
        (6, "quality analogue", c6_quality),
        (7, "speed analogue", c7_speed),
        (8, "pruning analogue", c8_pruning_sweep),
        (9, "per-step complexity", c9_complexity),
        (10, "beam oracle", c10_beam_oracle),
        (11, "infrastructure", c11_infrastructure),
    ];
    // bypass libtest's output capture so the per-criterion lines are
    // visible even when everything passes
    let say = |line: String| {
        use std::io::Write;
        match std::fs::OpenOptions::new().write(true).open("/dev/stdout") {
            Ok(mut out) => {
                let _ = writeln!(out, "{line}");
            }
            Err(_) => println!("{line}"),
        }
    };
    let mut failed = Vec::new();
    for (n, label, f) in criteria {
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => say(format!("criterion {n:2} ({label}): pass — {detail}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".to_string());
                say(format!("criterion {n:2} ({label}): FAIL — {msg}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
