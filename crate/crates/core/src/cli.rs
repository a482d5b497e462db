//! Command-line entry points: training, distillation, gate fine-tuning
//! plus pruning, file decoding, benchmarking, and a `reproduce`
//! meta-command chaining the whole pipeline from one seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{measure_wps, report_csv, report_table, BenchConfig, BenchReport};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::decode::{beam_search, BeamConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, DecoderKind, Model, ModelConfig};
use crate::pruning::{finalize_prune, head_report, GateSet};
use crate::training::{
    distill_dataset, exact_match, finetune_gates, generate_task_data, train, Dataset, Pair,
    TaskSpec, TrainingConfig,
};

fn default_bench() -> BenchConfig {
    BenchConfig {
        batch_size: 1,
        repeats: 10,
        warmup_runs: 2,
        beam: BeamConfig::default(),
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub metrics_csv: Option<PathBuf>,
}

/// One JSON file drives a whole experiment; unknown keys are rejected
/// to catch typos.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub task: TaskSpec,
    #[serde(default = "default_bench")]
    pub bench: BenchConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::config(format!("config not found: {}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.training.validate()?;
        cfg.bench.validate()?;
        Ok(cfg)
    }

    /// Applies the global --seed override to every seeded component.
    pub fn reseed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.training.seed = s;
            self.task.seed = s.wrapping_add(1);
        }
    }
}

#[derive(Parser)]
#[command(
    name = "deskmt",
    about = "Desk-scale NMT decoder-efficiency workbench",
    version
)]
struct Cli {
    /// Overrides every configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on the configured synthetic task.
    Train(TrainArgs),
    /// Decode the task's training sources with a teacher checkpoint.
    Distill(DistillArgs),
    /// Fine-tune head gates under the L0 objective, then remove heads.
    Prune(PruneArgs),
    /// Translate a file of token-id lines.
    Decode(DecodeArgs),
    /// Measure words per second for one or more checkpoints.
    Bench(BenchArgs),
    /// Chain train -> distill -> student -> prune -> bench from one seed.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path (overrides config paths).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV output path (overrides config paths).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    config: PathBuf,
    /// Teacher checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output dataset (tab-separated source/target token-id lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// L0 penalty weight (lambda).
    #[arg(long)]
    lambda: f64,
    /// Fine-tuning updates before head removal.
    #[arg(long)]
    updates: usize,
    /// Heads with deterministic gate <= threshold are removed.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input file: one space-separated token-id line per sentence.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Length-normalization exponent.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoints to compare; the first is the speedup baseline.
    #[arg(required = true)]
    ckpts: Vec<PathBuf>,
    /// Where to write the CSV report (aligned table goes to stdout).
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

/// True for errors the user caused with bad flags, configs, or inputs.
fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Json(_))
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Train(a) => cmd_train(&a, cli.seed),
        Cmd::Distill(a) => cmd_distill(&a, cli.seed),
        Cmd::Prune(a) => cmd_prune(&a, cli.seed),
        Cmd::Decode(a) => cmd_decode(&a),
        Cmd::Bench(a) => cmd_bench(&a, cli.seed),
        Cmd::Reproduce(a) => cmd_reproduce(&a, cli.seed),
    };
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                2
            } else {
                1
            }
        }
    }
}

fn model_seed(cfg: &RunConfig) -> u64 {
    cfg.training.seed.wrapping_add(0x6d6f64656c)
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.reseed(seed);
    if cfg.task.vocab != cfg.model.src_vocab || cfg.task.vocab != cfg.model.tgt_vocab {
        return Err(Error::config(
            "task vocab must equal model src_vocab and tgt_vocab",
        ));
    }
    let data = generate_task_data(&cfg.task)?;
    let mut model = build_model::<f32>(&cfg.model, model_seed(&cfg))?;
    let log = train(&mut model, &data, &cfg.training)?;
    let (em, tok_acc) = exact_match(&model, &data.valid)?;
    let ckpt_path = args
        .out
        .clone()
        .or(cfg.paths.checkpoint.clone())
        .ok_or_else(|| Error::config("no checkpoint output path (--out or paths.checkpoint)"))?;
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            model,
            gates: None,
            train_state: None,
        },
    )?;
    if let Some(metrics) = args.metrics.clone().or(cfg.paths.metrics_csv.clone()) {
        std::fs::write(&metrics, log.to_csv())?;
    }
    let last = log.rows.last().expect("max_updates >= 1");
    println!(
        "trained {} updates: train_loss {:.4}, valid exact-match {:.1}%, token acc {:.1}%",
        last.step,
        last.train_loss,
        em * 100.0,
        tok_acc * 100.0
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn parse_token_line(line: &str, lineno: usize, vocab: usize) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for tok in line.split_whitespace() {
        let id: u32 = tok
            .parse()
            .map_err(|_| Error::config(format!("line {lineno}: bad token '{tok}'")))?;
        if id as usize >= vocab {
            return Err(Error::Vocab {
                token: id,
                vocab,
                context: Some(format!("input line {lineno}")),
            });
        }
        out.push(id);
    }
    Ok(out)
}

fn join_tokens(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_distill(args: &DistillArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.reseed(seed);
    let teacher = load_checkpoint(&args.ckpt)?.model;
    if teacher.config.src_vocab != cfg.task.vocab {
        return Err(Error::config(format!(
            "teacher vocab {} != task vocab {}",
            teacher.config.src_vocab, cfg.task.vocab
        )));
    }
    let data = generate_task_data(&cfg.task)?;
    let sources: Vec<Vec<u32>> = data.train.iter().map(|(s, _)| s.clone()).collect();
    let beam = BeamConfig {
        beam_width: args.beam,
        max_len: (cfg.task.max_len * 2 + 4).min(teacher.config.max_len),
        ..BeamConfig::default()
    };
    let pairs = distill_dataset(&teacher, &sources, &beam)?;
    let mut out = String::new();
    for (src, tgt) in &pairs {
        out.push_str(&format!("{}\t{}\n", join_tokens(src), join_tokens(tgt)));
    }
    std::fs::write(&args.out, out)?;
    println!("distilled {} pairs -> {}", pairs.len(), args.out.display());
    Ok(())
}

/// Reads a distilled dataset written by cmd_distill.
pub fn read_pair_file(path: &Path, vocab: usize) -> Result<Vec<Pair>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (s, t) = line
            .split_once('\t')
            .ok_or_else(|| Error::config(format!("line {}: missing tab separator", i + 1)))?;
        pairs.push((
            parse_token_line(s, i + 1, vocab)?,
            parse_token_line(t, i + 1, vocab)?,
        ));
    }
    Ok(pairs)
}

fn cmd_prune(args: &PruneArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.reseed(seed);
    let loaded = load_checkpoint(&args.ckpt)?;
    let mut model = loaded.model;
    let mut gates = loaded.gates.unwrap_or_else(|| GateSet::fresh_for(&model));
    let before = head_report(&model);
    let before_params = model.param_count();
    let data = generate_task_data(&cfg.task)?;
    let ft_cfg = TrainingConfig {
        lambda: args.lambda,
        max_updates: args.updates,
        ..cfg.training.clone()
    };
    finetune_gates(&mut model, &mut gates, &data, &ft_cfg)?;
    let pruned = finalize_prune(&model, &gates, args.threshold)?;
    let after = head_report(&pruned);
    println!(
        "heads (enc/enc-dec/dec): {before} -> {after}; params {} -> {}",
        before_params,
        pruned.param_count()
    );
    save_checkpoint(
        &args.out,
        &Checkpoint {
            model: pruned,
            gates: None,
            train_state: None,
        },
    )?;
    println!("pruned checkpoint: {}", args.out.display());
    Ok(())
}

fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?.model;
    let text = std::fs::read_to_string(&args.input)?;
    let beam = BeamConfig {
        beam_width: args.beam,
        max_len: args.max_len.unwrap_or(model.config.max_len.min(64)),
        alpha: args.alpha,
        min_len: 0,
    };
    if beam.beam_width == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let src = parse_token_line(line, i + 1, model.config.src_vocab)?;
        if src.is_empty() {
            out.push('\n');
            continue;
        }
        let hyps = beam_search(&model, &src, &beam)?;
        out.push_str(&join_tokens(&hyps[0].tokens));
        out.push('\n');
    }
    std::fs::write(&args.out, out)?;
    Ok(())
}

fn bench_reports(
    cfg: &RunConfig,
    ckpts: &[PathBuf],
    test_pairs: &[Pair],
) -> Result<Vec<BenchReport>> {
    let sources: Vec<Vec<u32>> = test_pairs.iter().map(|(s, _)| s.clone()).collect();
    let refs: Vec<Vec<u32>> = test_pairs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::new();
    for path in ckpts {
        let model = load_checkpoint(path)
            .map_err(|e| Error::Bench(format!("{}: {e}", path.display())))?
            .model;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let mut bench = cfg.bench.clone();
        bench.beam.max_len = bench.beam.max_len.min(model.config.max_len);
        bench.beam.min_len = bench.beam.min_len.min(bench.beam.max_len);
        let stats = measure_wps(&model, &sources, &bench)?;
        reports.push(BenchReport::from_run(name, &model, &stats, &refs)?);
    }
    Ok(reports)
}

fn cmd_bench(args: &BenchArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.reseed(seed);
    let data = generate_task_data(&cfg.task)?;
    let reports = bench_reports(&cfg, &args.ckpts, &data.test)?;
    let baseline = reports[0].name.clone();
    print!("{}", report_table(&reports, &baseline)?);
    if let Some(out) = &args.out_csv {
        std::fs::write(out, report_csv(&reports, &baseline)?)?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

struct Variant {
    name: &'static str,
    config: ModelConfig,
}

/// The cumulative decoder-efficiency ladder, derived from the
/// configured baseline: MHSA baseline, SSRU decoder, + FFN removal,
/// + deep encoder / single-layer decoder at constant total depth.
fn table3_variants(base: &ModelConfig) -> Vec<Variant> {
    let mut baseline = base.clone();
    baseline.decoder_kind = DecoderKind::Mhsa;
    baseline.decoder_ffn = true;
    let mut ssru = baseline.clone();
    ssru.decoder_kind = DecoderKind::Ssru;
    let mut noffn = ssru.clone();
    noffn.decoder_ffn = false;
    let mut deep = noffn.clone();
    deep.enc_layers = base.enc_layers + base.dec_layers - 1;
    deep.dec_layers = 1;
    vec![
        Variant {
            name: "baseline",
            config: baseline,
        },
        Variant {
            name: "ssru",
            config: ssru,
        },
        Variant {
            name: "ssru_noffn",
            config: noffn,
        },
        Variant {
            name: "deep_shallow",
            config: deep,
        },
    ]
}

fn train_variant(
    name: &str,
    config: &ModelConfig,
    data: &Dataset,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<(Model<f32>, PathBuf)> {
    let mut model = build_model::<f32>(config, model_seed(cfg))?;
    let log = train(&mut model, data, &cfg.training)?;
    std::fs::write(out_dir.join(format!("{name}_metrics.csv")), log.to_csv())?;
    let path = out_dir.join(format!("{name}.ckpt"));
    save_checkpoint(
        &path,
        &Checkpoint {
            model: model.clone(),
            gates: None,
            train_state: None,
        },
    )?;
    Ok((model, path))
}

fn cmd_reproduce(args: &ReproduceArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.reseed(seed);
    std::fs::create_dir_all(&args.out_dir)?;
    let data = generate_task_data(&cfg.task)?;

    // quality/speed ladder: train each variant on the same data
    let mut paths = Vec::new();
    let mut models = Vec::new();
    for v in table3_variants(&cfg.model) {
        println!("training {} ...", v.name);
        let (model, path) = train_variant(v.name, &v.config, &data, &cfg, &args.out_dir)?;
        models.push((v.name, model));
        paths.push(path);
    }

    // sequence-level distillation: baseline teaches the fastest variant
    println!("distilling ...");
    let teacher = &models[0].1;
    let sources: Vec<Vec<u32>> = data.train.iter().map(|(s, _)| s.clone()).collect();
    let beam = BeamConfig {
        max_len: (cfg.task.max_len * 2 + 4).min(teacher.config.max_len),
        ..BeamConfig::default()
    };
    let distilled_pairs = distill_dataset(teacher, &sources, &beam)?;
    let mut tsv = String::new();
    for (s, t) in &distilled_pairs {
        tsv.push_str(&format!("{}\t{}\n", join_tokens(s), join_tokens(t)));
    }
    std::fs::write(args.out_dir.join("distilled.tsv"), tsv)?;
    let student_data = Dataset {
        train: distilled_pairs,
        valid: data.valid.clone(),
        test: data.test.clone(),
    };
    let deep_cfg = table3_variants(&cfg.model).pop().unwrap().config;
    println!("training student on distilled data ...");
    let (_, student_path) =
        train_variant("student_kd", &deep_cfg, &student_data, &cfg, &args.out_dir)?;
    paths.push(student_path);

    // pruning report: gate fine-tuning + head removal on the
    // deep-encoder model
    println!("pruning heads ...");
    let (deep_name, deep_model) = {
        let (n, m) = &models[3];
        (*n, m.clone())
    };
    let mut pruned_model = deep_model.clone();
    let mut gates = GateSet::fresh_for(&pruned_model);
    let ft_cfg = TrainingConfig {
        lambda: if cfg.training.lambda > 0.0 {
            cfg.training.lambda
        } else {
            0.05
        },
        ..cfg.training.clone()
    };
    finetune_gates(&mut pruned_model, &mut gates, &data, &ft_cfg)?;
    let pruned = finalize_prune(&pruned_model, &gates, 0.0)?;
    let before = head_report(&deep_model);
    let after = head_report(&pruned);
    let pruned_path = args.out_dir.join("pruned.ckpt");
    save_checkpoint(
        &pruned_path,
        &Checkpoint {
            model: pruned.clone(),
            gates: None,
            train_state: None,
        },
    )?;
    let (em_before, _) = exact_match(&deep_model, &data.valid)?;
    let (em_after, _) = exact_match(&pruned, &data.valid)?;
    std::fs::write(
        args.out_dir.join("table2.csv"),
        format!(
            "config_name,heads_enc,heads_encdec,heads_dec,params,exact_match\n\
             {deep_name},{},{},{},{},{:.4}\n\
             pruned,{},{},{},{},{:.4}\n",
            before.enc,
            before.enc_dec,
            before.dec.map(|d| d.to_string()).unwrap_or("-".into()),
            deep_model.param_count(),
            em_before,
            after.enc,
            after.enc_dec,
            after.dec.map(|d| d.to_string()).unwrap_or("-".into()),
            pruned.param_count(),
            em_after,
        ),
    )?;
    paths.push(pruned_path);

    // benchmark the whole ladder
    println!("benchmarking ...");
    let reports = bench_reports(&cfg, &paths, &data.test)?;
    let table = report_table(&reports, "baseline")?;
    print!("{table}");
    std::fs::write(
        args.out_dir.join("table1_table3.csv"),
        report_csv(&reports, "baseline")?,
    )?;
    std::fs::write(args.out_dir.join("table1_table3.txt"), table)?;
    println!("reports in {}", args.out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runconfig_rejects_unknown_keys() {
        let json = r#"{
            "model": {"enc_layers":1,"dec_layers":1,"d_model":16,"n_heads":2,"d_ffn":24,
                      "src_vocab":12,"tgt_vocab":12,"decoder_kind":"Ssru"},
            "training": {"max_updates": 10},
            "task": {"kind":"copy","vocab":12,"min_len":3,"max_len":5,
                     "train_size":10,"valid_size":2,"test_size":2},
            "typo_key": 1
        }"#;
        let r: std::result::Result<RunConfig, _> = serde_json::from_str(json);
        assert!(r.is_err());
        let err = r.unwrap_err().to_string();
        assert!(err.contains("typo_key"), "{err}");
    }

    #[test]
    fn runconfig_minimal_parses_with_defaults() {
        let json = r#"{
            "model": {"enc_layers":1,"dec_layers":1,"d_model":16,"n_heads":2,"d_ffn":24,
                      "src_vocab":12,"tgt_vocab":12,"decoder_kind":"Ssru"},
            "training": {"max_updates": 10},
            "task": {"kind":"copy","vocab":12,"min_len":3,"max_len":5,
                     "train_size":10,"valid_size":2,"test_size":2}
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.bench.repeats, 10);
        assert_eq!(cfg.bench.beam.beam_width, 5);
        assert!((cfg.training.peak_lr - 7e-4).abs() < 1e-12);
        assert!(cfg.paths.checkpoint.is_none());
    }

    #[test]
    fn token_line_parsing() {
        assert_eq!(parse_token_line("4 5 6", 1, 10).unwrap(), vec![4, 5, 6]);
        assert!(parse_token_line("4 x", 3, 10).is_err());
        let err = parse_token_line("4 99", 7, 10).unwrap_err().to_string();
        assert!(err.contains("7"), "{err}");
        assert_eq!(join_tokens(&[4, 5, 6]), "4 5 6");
    }

    #[test]
    fn table3_ladder_shapes() {
        let base = ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 24,
            src_vocab: 12,
            tgt_vocab: 12,
            decoder_kind: DecoderKind::Mhsa,
            decoder_ffn: true,
            aan_gating: false,
            max_len: 32,
            head_layout: None,
        };
        let vs = table3_variants(&base);
        assert_eq!(vs.len(), 4);
        assert_eq!(vs[0].config.decoder_kind, DecoderKind::Mhsa);
        assert_eq!(vs[1].config.decoder_kind, DecoderKind::Ssru);
        assert!(vs[1].config.decoder_ffn);
        assert!(!vs[2].config.decoder_ffn);
        assert_eq!(vs[3].config.enc_layers, 3);
        assert_eq!(vs[3].config.dec_layers, 1);
    }
}
