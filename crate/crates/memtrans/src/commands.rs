//! The `memtrans` subcommands. Each returns the JSON document printed on
//! stdout; human-oriented progress goes to stderr.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use memtrans_core::analysis::{self, heatmap_pgm, AttentionRecord, Stage, Thresholds};
use memtrans_core::data::{
    encode_tsv, gen_task, pairs_to_tsv, parse_tsv_corpus, tokenize, Batch, BatchSource, CorpusStream, Pair,
    TaskKind, TaskStream, Vocab, VocabMode,
};
use memtrans_core::experiments::{complexity_bench, extend_memory, lesion_grid, ExperimentReport, Provenance, LESION_SIZES};
use memtrans_core::models::{lesion_memory, MemoryLayout, Model, Pass, Variant};
use memtrans_core::training::{evaluate, mean_loss, EvalMetrics, Flow, StepMetrics, TrainConfig, Trainer};
use serde::Serialize;
use serde_json::{json, Value};

use crate::bench::WallTimer;
use crate::checkpoint::{checkpoint_hash, Checkpoint, DataSpec};
use crate::dump::{read_dump, write_dump, DumpLayout, DumpTokens};
use crate::error::{Error, Result};
use crate::hashing::config_hash;
use crate::runconfig::{parse_variant, DataSource, RunConfig};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const EVAL_SET: &str = "eval.tsv";

#[derive(Debug, Parser)]
#[command(name = "memtrans", version, about = "Memory-augmented transformer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train a model from a run configuration file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a TSV file.
    Eval(EvalArgs),
    /// Evaluate a checkpoint at several encoder memory sizes.
    Lesion(LesionArgs),
    /// Append memory tokens to a checkpoint and fine-tune.
    Extend(ExtendArgs),
    /// Attention-cost scaling: analytic counts and wall times.
    Bench(BenchArgs),
    /// Capture every attention map for one input and write a dump.
    DumpAttn(DumpAttnArgs),
    /// Classify the attention maps of a dump.
    Analyze(AnalyzeArgs),
    /// Write a synthetic task as TSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Evaluate (and checkpoint) every N steps; 0 evaluates only at the end.
    #[arg(long, default_value_t = 500)]
    pub eval_every: u64,
    /// Held-out sequences generated for task runs.
    #[arg(long, default_value_t = 500)]
    pub eval_size: usize,
    /// Stop at the first evaluation whose token accuracy reaches this.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    /// Continue from `out_dir/checkpoint` if it exists.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 64)]
    pub eval_batch_size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `source<TAB>target` lines.
    #[arg(long)]
    pub data: PathBuf,
    /// Resize the encoder memory before evaluating.
    #[arg(long)]
    pub mem_size: Option<usize>,
    /// Seed for memory rows added by `--mem-size`.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LesionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = LESION_SIZES.to_vec())]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExtendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation TSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Memory tokens added per stage.
    #[arg(long, default_value_t = 5)]
    pub add: usize,
    #[arg(long, default_value_t = 1)]
    pub stages: usize,
    /// Fine-tuning steps per stage.
    #[arg(long, default_value_t = 200)]
    pub finetune_steps: u64,
    /// Warmup for the fine-tuning schedule; defaults to the checkpoint's.
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Directory for per-stage checkpoints and reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![128, 256, 512, 1024])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub mem: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["baseline".to_string(), "mem_bottleneck".to_string()])]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub d_ff: usize,
    /// Analytic counts only.
    #[arg(long)]
    pub no_wall: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DumpAttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source text, tokenized like the training data.
    #[arg(long)]
    pub input: String,
    /// Target text for teacher forcing; the greedy output when omitted.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dump: PathBuf,
    /// Write one PGM heatmap per record here.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = Thresholds::default().mass)]
    pub tau_mass: f64,
    #[arg(long, default_value_t = Thresholds::default().diag)]
    pub tau_diag: f64,
    #[arg(long, default_value_t = Thresholds::default().sharp)]
    pub tau_sharp: f64,
    #[arg(long, default_value_t = Thresholds::default().band)]
    pub band: usize,
    #[arg(long, default_value_t = Thresholds::default().heterogeneous_sharpness)]
    pub tau_heterogeneous: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value = "copy")]
    pub task: String,
    #[arg(long, default_value_t = 2)]
    pub len_min: usize,
    #[arg(long, default_value_t = 16)]
    pub len_max: usize,
    #[arg(long, default_value_t = 20)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(command: &Command) -> Result<Value> {
    let hash = config_hash(command);
    let mut out = match command {
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Lesion(a) => cmd_lesion(a)?,
        Command::Extend(a) => cmd_extend(a)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::DumpAttn(a) => cmd_dump_attn(a)?,
        Command::Analyze(a) => cmd_analyze(a)?,
        Command::GenData(a) => cmd_gen_data(a)?,
    };
    if let Value::Object(map) = &mut out {
        map.entry("config_hash").or_insert(Value::String(hash));
    }
    Ok(out)
}

fn environment() -> String {
    format!(
        "{}-{} memtrans {}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        env!("CARGO_PKG_VERSION")
    )
}

fn to_json<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::format("json output", e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::format("json output", e.to_string()))?;
    fs::write(path, bytes).map_err(Error::io(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

/// Everything a training run needs besides the model.
pub struct TrainSetup {
    pub vocab_src: Vocab,
    pub vocab_tgt: Vocab,
    pub source: Box<dyn BatchSource>,
    pub eval_pairs: Vec<Pair>,
    pub data: DataSpec,
}

/// Builds vocabularies, the training stream and the held-out set. Task runs
/// draw `eval_size` fresh sequences; corpus runs hold out the last tenth of
/// the file.
pub fn prepare_data(cfg: &RunConfig, eval_size: usize) -> Result<TrainSetup> {
    match &cfg.data {
        DataSource::Task(kind) => {
            let vocab_src = Vocab::numeric(cfg.vocab_size, 0)?;
            let vocab_tgt = Vocab::numeric(cfg.vocab_size, cfg.m_dec)?;
            let source = TaskStream {
                kind: *kind,
                len_min: cfg.len_min,
                len_max: cfg.len_max,
                vocab_size: cfg.vocab_size,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                dec_mem_ids: vocab_tgt.mem_ids(),
            };
            let eval_pairs = gen_task(*kind, cfg.len_min, cfg.len_max, cfg.vocab_size, eval_size, cfg.seed)?;
            Ok(TrainSetup {
                vocab_src,
                vocab_tgt,
                source: Box::new(source),
                eval_pairs,
                data: DataSpec::Task {
                    task: *kind,
                    len_min: cfg.len_min,
                    len_max: cfg.len_max,
                    vocab_size: cfg.vocab_size,
                },
            })
        }
        DataSource::Corpus(path) => {
            let corpus = parse_tsv_corpus(&read_text(path)?, None, cfg.vocab_mode, cfg.m_dec)?;
            let mut pairs = corpus.pairs;
            if pairs.len() < 2 {
                return Err(Error::Usage(format!("{} needs at least two pairs", path.display())));
            }
            let held = pairs.len().div_ceil(10);
            let eval_pairs = pairs.split_off(pairs.len() - held);
            let source = CorpusStream {
                pairs,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                dec_mem_ids: corpus.vocab_tgt.mem_ids(),
            };
            Ok(TrainSetup {
                vocab_src: corpus.vocab_src,
                vocab_tgt: corpus.vocab_tgt,
                source: Box::new(source),
                eval_pairs,
                data: DataSpec::Corpus { path: path.clone() },
            })
        }
    }
}

/// Training stream for an existing checkpoint's data.
pub fn checkpoint_source(ckpt: &Checkpoint, train: &TrainConfig) -> Result<Box<dyn BatchSource>> {
    match &ckpt.data {
        Some(DataSpec::Task {
            task,
            len_min,
            len_max,
            vocab_size,
        }) => Ok(Box::new(TaskStream {
            kind: *task,
            len_min: *len_min,
            len_max: *len_max,
            vocab_size: *vocab_size,
            batch_size: train.batch_size,
            seed: train.seed,
            dec_mem_ids: ckpt.model.config.dec_mem_ids(),
        })),
        Some(DataSpec::Corpus { path }) => {
            let pairs = encode_tsv(&read_text(path)?, &ckpt.vocab_src, &ckpt.vocab_tgt, ckpt.vocab_mode)?;
            Ok(Box::new(CorpusStream {
                pairs,
                batch_size: train.batch_size,
                seed: train.seed,
                dec_mem_ids: ckpt.model.config.dec_mem_ids(),
            }))
        }
        None => Err(Error::Usage("checkpoint records no training data".into())),
    }
}

fn eval_line(step: u64, e: &EvalMetrics, loss: f64) -> Value {
    json!({
        "step": step,
        "token_accuracy": e.token_accuracy,
        "sequence_accuracy": e.sequence_accuracy,
        "bleu4": e.bleu4,
        "loss": loss,
        "count": e.count,
    })
}

/// Keeps the lines of a JSONL log whose `step` is at most `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(file) = File::open(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(Error::io(path))?;
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::format("log line", e.to_string()))?;
        if v["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(Error::io(path))
}

fn append_line(file: &mut File, path: &Path, v: &Value) -> Result<()> {
    writeln!(file, "{v}").map_err(Error::io(path))
}

fn cmd_train(a: &TrainArgs) -> Result<Value> {
    let cfg = RunConfig::load(&a.config)?;
    if a.eval_size == 0 {
        return Err(Error::Usage("--eval-size must be >= 1".into()));
    }
    let run_hash = {
        let mut c = cfg.clone();
        c.out_dir = PathBuf::new();
        config_hash(&c)
    };
    let setup = prepare_data(&cfg, a.eval_size)?;
    let mut tc = cfg.train_config();
    tc.eval_every = a.eval_every;
    let model_cfg = cfg.model_config(setup.vocab_src.len(), setup.vocab_tgt.len());

    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let snapshot = out.join(CONFIG_SNAPSHOT);
    fs::write(&snapshot, cfg.render()).map_err(Error::io(&snapshot))?;
    let eval_tsv = out.join(EVAL_SET);
    fs::write(
        &eval_tsv,
        pairs_to_tsv(&setup.eval_pairs, &setup.vocab_src, &setup.vocab_tgt, cfg.vocab_mode),
    )
    .map_err(Error::io(&eval_tsv))?;

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let metrics_path = out.join(METRICS_LOG);
    let eval_path = out.join(EVAL_LOG);
    let mut trainer = if a.resume && ckpt_dir.join(crate::checkpoint::MANIFEST).exists() {
        let ck = Checkpoint::load(&ckpt_dir)?;
        // The step budget and eval cadence may change between runs.
        let same_train = ck.train.as_ref().is_some_and(|t| {
            TrainConfig {
                eval_every: tc.eval_every,
                steps: tc.steps,
                ..t.clone()
            } == tc
        });
        if ck.model.config != model_cfg || !same_train {
            return Err(Error::Usage(format!(
                "checkpoint in {} was trained with a different configuration",
                ckpt_dir.display()
            )));
        }
        let adam = ck
            .adam
            .ok_or_else(|| Error::format("checkpoint", "no optimizer state to resume from"))?;
        truncate_log(&metrics_path, ck.step)?;
        truncate_log(&eval_path, ck.step)?;
        eprintln!("resuming at step {}", ck.step);
        Trainer::resume(ck.model, adam, tc.clone(), ck.step)?
    } else {
        for p in [&metrics_path, &eval_path] {
            File::create(p).map_err(Error::io(p))?;
        }
        Trainer::new(Model::new(model_cfg)?, tc.clone())?
    };
    let open = |p: &Path| fs::OpenOptions::new().append(true).open(p).map_err(Error::io(p));
    let mut metrics_file = open(&metrics_path)?;
    let mut eval_file = open(&eval_path)?;

    let save = |t: &Trainer| -> Result<()> {
        let ck = Checkpoint {
            model: t.model.clone(),
            vocab_src: setup.vocab_src.clone(),
            vocab_tgt: setup.vocab_tgt.clone(),
            vocab_mode: cfg.vocab_mode,
            step: t.step,
            train: Some(t.config.clone()),
            adam: Some(t.adam.clone()),
            data: Some(setup.data.clone()),
        };
        ck.save(&ckpt_dir)
    };
    let eval_bs = a.eval_batch_size.max(1);
    let do_eval = |t: &Trainer, file: &mut File| -> Result<EvalMetrics> {
        let e = evaluate(&t.model, &setup.eval_pairs, eval_bs)?;
        let loss = mean_loss(&t.model, &setup.eval_pairs, eval_bs)?;
        eprintln!(
            "step {:>6}  eval token_acc {:.5}  seq_acc {:.4}  bleu {:.2}",
            t.step, e.token_accuracy, e.sequence_accuracy, e.bleu4
        );
        append_line(file, &eval_path, &eval_line(t.step, &e, loss))?;
        Ok(e)
    };

    let mut failure: Option<Error> = None;
    let mut last_eval: Option<(u64, EvalMetrics)> = None;
    let mut last_metrics: Option<StepMetrics> = None;
    let mut stopped_early = false;
    let result = trainer.run(&*setup.source, |t, m| {
        last_metrics = Some(*m);
        let step_result = (|| -> Result<Flow> {
            append_line(&mut metrics_file, &metrics_path, &to_json(m)?)?;
            if m.step % 100 == 0 {
                eprintln!("step {:>6}  lr {:.3e}  loss {:.4}  token_acc {:.4}", m.step, m.lr, m.loss, m.token_acc);
            }
            if t.is_eval_step() {
                let e = do_eval(t, &mut eval_file)?;
                last_eval = Some((t.step, e));
                save(t)?;
                if a.target_accuracy.is_some_and(|target| e.token_accuracy >= target) {
                    stopped_early = true;
                    return Ok(Flow::Stop);
                }
            }
            Ok(Flow::Continue)
        })();
        match step_result {
            Ok(flow) => Ok(flow),
            Err(e) => {
                failure = Some(e);
                Ok(Flow::Stop)
            }
        }
    });
    result?;
    if let Some(e) = failure {
        return Err(e);
    }
    let final_eval = match last_eval {
        Some((s, e)) if s == trainer.step => e,
        _ => {
            let e = do_eval(&trainer, &mut eval_file)?;
            save(&trainer)?;
            e
        }
    };
    eval_file.flush().map_err(Error::io(&eval_path))?;
    Ok(json!({
        "command": "train",
        "config_hash": run_hash,
        "out_dir": out,
        "steps": trainer.step,
        "stopped_early": stopped_early,
        "final_train_loss": last_metrics.map(|m| m.loss),
        "eval": to_json(&final_eval)?,
        "checkpoint": ckpt_dir,
        "checkpoint_hash": checkpoint_hash(&ckpt_dir)?,
    }))
}

fn load_with_hash(dir: &Path) -> Result<(Checkpoint, String)> {
    let ck = Checkpoint::load(dir)?;
    let hash = checkpoint_hash(dir)?;
    Ok((ck, hash))
}

fn eval_pairs_for(ck: &Checkpoint, path: &Path) -> Result<Vec<Pair>> {
    let pairs = encode_tsv(&read_text(path)?, &ck.vocab_src, &ck.vocab_tgt, ck.vocab_mode)?;
    if pairs.is_empty() {
        return Err(Error::Usage(format!("{} holds no pairs", path.display())));
    }
    Ok(pairs)
}

fn provenance(dir: &Path, hash: &str, seed: u64) -> Provenance {
    Provenance {
        checkpoint_id: dir.display().to_string(),
        checkpoint_hash: hash.to_string(),
        seed,
        environment: environment(),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let (ck, hash) = load_with_hash(&a.checkpoint)?;
    let pairs = eval_pairs_for(&ck, &a.data)?;
    let model = match a.mem_size {
        Some(m) => lesion_memory(&ck.model, m, a.init_seed)?,
        None => ck.model,
    };
    let bs = a.batch_size.max(1);
    let e = evaluate(&model, &pairs, bs)?;
    let loss = mean_loss(&model, &pairs, bs)?;
    Ok(json!({
        "command": "eval",
        "checkpoint_hash": hash,
        "mem_size": model.memory_size(),
        "metrics": to_json(&e)?,
        "loss": loss,
    }))
}

fn cmd_lesion(a: &LesionArgs) -> Result<Value> {
    let (ck, hash) = load_with_hash(&a.checkpoint)?;
    let pairs = eval_pairs_for(&ck, &a.data)?;
    let report = lesion_grid(
        &ck.model,
        &a.sizes,
        &pairs,
        a.batch_size.max(1),
        a.init_seed,
        provenance(&a.checkpoint, &hash, a.init_seed),
    )?;
    eprint!("{}", report.render_table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(json!({"command": "lesion", "report": to_json(&report)?}))
}

fn cmd_extend(a: &ExtendArgs) -> Result<Value> {
    if a.stages == 0 {
        return Err(Error::Usage("--stages must be >= 1".into()));
    }
    let (ck, hash) = load_with_hash(&a.checkpoint)?;
    let pairs = eval_pairs_for(&ck, &a.data)?;
    let mut train = ck
        .train
        .clone()
        .ok_or_else(|| Error::Usage("checkpoint records no training configuration".into()))?;
    train.steps = a.finetune_steps;
    train.eval_every = 0;
    if let Some(w) = a.warmup_steps {
        train.warmup_steps = w;
    }
    let source = checkpoint_source(&ck, &train)?;
    let mut current = ck.clone();
    let mut prov = provenance(&a.checkpoint, &hash, a.init_seed);
    let mut reports: Vec<ExperimentReport> = Vec::new();
    for stage in 0..a.stages {
        let ext = extend_memory(
            &current.model,
            a.add,
            &train,
            &*source,
            &pairs,
            a.batch_size.max(1),
            a.init_seed,
            prov.clone(),
        )?;
        eprint!("{}", ext.report.render_table());
        let dir = a.out.join(format!("stage{}", stage + 1));
        current = Checkpoint {
            model: ext.model,
            step: 0,
            train: Some(train.clone()),
            adam: None,
            ..current
        };
        current.save(&dir.join(CHECKPOINT_DIR))?;
        write_json(&dir.join("report.json"), &ext.report)?;
        let log_path = dir.join(METRICS_LOG);
        let mut log = File::create(&log_path).map_err(Error::io(&log_path))?;
        for m in &ext.log {
            append_line(&mut log, &log_path, &to_json(m)?)?;
        }
        prov = provenance(&dir.join(CHECKPOINT_DIR), &checkpoint_hash(&dir.join(CHECKPOINT_DIR))?, a.init_seed);
        reports.push(ext.report);
    }
    Ok(json!({
        "command": "extend",
        "final_mem_size": current.model.memory_size(),
        "checkpoint": a.out.join(format!("stage{}", a.stages)).join(CHECKPOINT_DIR),
        "reports": to_json(&reports)?,
    }))
}

fn cmd_bench(a: &BenchArgs) -> Result<Value> {
    let variants = a
        .variants
        .iter()
        .map(|s| parse_variant(s).map_err(|e| Error::Usage(format!("--variants {s:?}: {e}"))))
        .collect::<Result<Vec<Variant>>>()?;
    let max_len = a.lengths.iter().max().copied().unwrap_or(0) + a.mem;
    let mut timer = WallTimer::new(a.trials, a.d_model, a.heads, a.d_ff, max_len);
    let mut time = |v: Variant, n: usize, m: usize| {
        let t = timer.time(v, n, m);
        if let Ok(s) = &t {
            eprintln!("{:<22} n={n:<6} m={m:<4} {:.6}s", v.name(), s);
        }
        t
    };
    let prov = Provenance {
        environment: environment(),
        ..Provenance::default()
    };
    let report = complexity_bench(
        &variants,
        &a.lengths,
        a.mem,
        a.d_model,
        if a.no_wall { None } else { Some(&mut time) },
        prov,
    )?;
    eprint!("{}", report.render_table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(json!({"command": "bench", "report": to_json(&report)?}))
}

fn relabel(labels: &[String], vocab: &Vocab) -> Vec<String> {
    labels
        .iter()
        .map(|l| match l.parse::<usize>() {
            Ok(id) => vocab.token(id).to_string(),
            Err(_) => l.clone(),
        })
        .collect()
}

/// Runs one teacher-forced forward pass with capture on and returns the
/// records with token labels.
pub fn capture_attention(ck: &Checkpoint, src: &[usize], tgt: &[usize]) -> Result<Vec<AttentionRecord>> {
    let batch = Batch::new(&[(src.to_vec(), tgt.to_vec())], &ck.model.config.dec_mem_ids());
    let mut pass = Pass::capturing();
    ck.model.loss(&mut pass, &batch)?;
    let mut records = pass.records;
    for r in &mut records {
        let (rows, cols) = match r.stage {
            Stage::DecSelf => (&ck.vocab_tgt, &ck.vocab_tgt),
            Stage::DecCross => (&ck.vocab_tgt, &ck.vocab_src),
            _ => (&ck.vocab_src, &ck.vocab_src),
        };
        r.row_labels = relabel(&r.row_labels, rows);
        r.col_labels = relabel(&r.col_labels, cols);
    }
    Ok(records)
}

fn cmd_dump_attn(a: &DumpAttnArgs) -> Result<Value> {
    let (ck, hash) = load_with_hash(&a.checkpoint)?;
    let src = ck.vocab_src.encode(&tokenize(&a.input, ck.vocab_mode));
    if src.is_empty() {
        return Err(Error::Usage("--input is empty".into()));
    }
    let tgt = match &a.target {
        Some(t) => ck.vocab_tgt.encode(&tokenize(t, ck.vocab_mode)),
        None => ck
            .model
            .greedy_decode(&[src.clone()], src.len() * 2 + 2)?
            .pop()
            .unwrap_or_default(),
    };
    let records = capture_attention(&ck, &src, &tgt)?;
    let m_dec = ck.model.config.m_dec;
    let mut target_tokens: Vec<String> = (0..m_dec).map(|k| format!("[mem]{k}")).collect();
    target_tokens.push(ck.vocab_tgt.token(memtrans_core::data::BOS).to_string());
    target_tokens.extend(tgt.iter().map(|&i| ck.vocab_tgt.token(i).to_string()));
    let tokens = DumpTokens {
        source: src.iter().map(|&i| ck.vocab_src.token(i).to_string()).collect(),
        target: target_tokens,
    };
    let layout = DumpLayout {
        encoder: MemoryLayout::new(ck.model.memory_size(), src.len()),
        decoder: MemoryLayout::new(m_dec, tgt.len() + 1),
    };
    let manifest = write_dump(&a.out, &hash, tokens, layout, &records)?;
    Ok(json!({
        "command": "dump_attn",
        "checkpoint_hash": hash,
        "records": manifest.records.len(),
        "out": a.out,
    }))
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<Value> {
    let th = Thresholds {
        mass: a.tau_mass,
        diag: a.tau_diag,
        sharp: a.tau_sharp,
        band: a.band,
        heterogeneous_sharpness: a.tau_heterogeneous,
    };
    let (_, records) = read_dump(&a.dump)?;
    if records.is_empty() {
        return Err(Error::Usage(format!("{} holds no records", a.dump.display())));
    }
    let report = analysis::report(&records, &th);
    if let Some(dir) = &a.heatmaps {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        for (rec, row) in records.iter().zip(&report.records) {
            let path = dir.join(&row.heatmap);
            fs::write(&path, heatmap_pgm(&rec.weights)).map_err(Error::io(&path))?;
        }
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(json!({"command": "analyze", "report": to_json(&report)?}))
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<Value> {
    let kind: TaskKind = a.task.parse()?;
    let pairs = gen_task(kind, a.len_min, a.len_max, a.vocab_size, a.count, a.seed)?;
    let vocab = Vocab::numeric(a.vocab_size, 0)?;
    let text = pairs_to_tsv(&pairs, &vocab, &vocab, VocabMode::Word);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(&a.out, text).map_err(Error::io(&a.out))?;
    Ok(json!({"command": "gen_data", "pairs": pairs.len(), "out": a.out}))
}
