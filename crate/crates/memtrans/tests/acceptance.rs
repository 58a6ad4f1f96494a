//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Criterion 5 trains two small models and dominates the runtime.

#[path = "../../core/tests/support/grad_suite.rs"]
mod grad_suite;

use std::time::Instant;

use memtrans::bench::WallTimer;
use memtrans::checkpoint::Checkpoint;
use memtrans::commands::capture_attention;
use memtrans::dump::{read_dump, write_dump, DumpLayout, DumpTokens};
use memtrans::Result;
use memtrans_core::analysis::{classify, quadrant_scores, AttentionRecord, Label, Stage, Thresholds};
use memtrans_core::data::{gen_task, Batch, Pair, TaskKind, TaskStream, TokenGrid, Vocab, VocabMode};
use memtrans_core::experiments::{complexity_bench, extend_memory, lesion_grid, Provenance, LESION_SIZES};
use memtrans_core::models::{lesion_memory, BottleneckKv, MemoryLayout, Model, ModelConfig, Pass, Variant};
use memtrans_core::training::{corpus_bleu, evaluate, mean_loss, modified_precision, noam_lr, Flow, TrainConfig, Trainer};
use memtrans_core::Tensor;

struct Outcome {
    failed: Vec<u32>,
}

impl Outcome {
    fn report(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        println!("{} criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }

    fn run(&mut self, id: u32, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let start = Instant::now();
        match f() {
            Ok((pass, detail)) => self.report(id, name, pass, format!("{detail} [{:.1}s]", start.elapsed().as_secs_f64())),
            Err(e) => self.report(id, name, false, format!("error: {e}")),
        }
    }
}

fn config(variant: Variant, d_model: usize, heads: usize, d_ff: usize, m_enc: usize, m_dec: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        variant,
        n_layers_enc: 2,
        n_layers_dec: 2,
        d_model,
        d_ff,
        heads,
        p_drop: 0.0,
        m_enc,
        m_dec,
        vocab_src: vocab,
        vocab_tgt: vocab + m_dec,
        max_len: 64,
        pe_on_memory: false,
        bottleneck_kv: BottleneckKv::Post,
        seed: 5,
    }
}

fn logits(model: &Model, batch: &Batch) -> Result<Tensor> {
    let mut pass = Pass::eval();
    let (_, dec) = model.loss(&mut pass, batch)?;
    Ok(pass.tape.value(dec.logits).clone())
}

fn criterion_1() -> Result<(bool, String)> {
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (name, r) in grad_suite::op_reports().into_iter().chain(grad_suite::variant_reports()) {
        checked += 1;
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, format!("{name} {}", r.worst));
        }
    }
    Ok((
        worst.0 < grad_suite::TOLERANCE,
        format!("{checked} checks, max relative error {:.2e} ({}), limit 1e-4", worst.0, worst.1),
    ))
}

fn criterion_2() -> Result<(bool, String)> {
    let pairs: Vec<Pair> = gen_task(TaskKind::Reverse, 2, 7, 14, 6, 21)?;

    let base = Model::new(config(Variant::Baseline, 16, 2, 32, 0, 0, 14))?;
    let mut mem0 = Model::new(config(Variant::Mem, 16, 2, 32, 0, 0, 14))?;
    mem0.copy_matching_from(&base);
    let b0 = Batch::new(&pairs, &[]);
    let a = logits(&base, &b0)? == logits(&mem0, &b0)?;

    let mem = Model::new(config(Variant::Mem, 16, 2, 32, 4, 0, 14))?;
    let mut ctrl = Model::new(config(Variant::MemCtrl, 16, 2, 32, 4, 0, 14))?;
    ctrl.copy_matching_from(&mem);
    let split: Vec<String> = ctrl
        .params
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.contains(".mem.") || n.contains(".seq."))
        .collect();
    for name in split {
        let from = name.replacen(".mem.", ".", 1).replacen(".seq.", ".", 1);
        let v = mem.params.by_name(&from).expect("matching parameter").value.clone();
        let id = ctrl.params.id(&name).expect("own parameter");
        ctrl.params.replace(id, v);
    }
    let b = logits(&mem, &b0)?.max_abs_diff(&logits(&ctrl, &b0)?);

    let trained_m = lesion_memory(&mem, 4, 99)?;
    let c = evaluate(&trained_m, &pairs, 4)? == evaluate(&mem, &pairs, 4)?
        && mean_loss(&trained_m, &pairs, 4)? == mean_loss(&mem, &pairs, 4)?;

    Ok((
        a && b <= 1e-12 && c,
        format!("m=0 bitwise {a}; mem_ctrl vs mem max diff {b:.1e} (<= 1e-12); lesion to trained m exact {c}"),
    ))
}

fn criterion_3() -> Result<(bool, String)> {
    let (d, m, n) = (16, 3, 6);
    let model = Model::new(config(Variant::MemBottleneck, d, 2, 32, m, 0, 14))?;
    let frozen: Vec<Tensor> = (0..2)
        .map(|l| Tensor::new(&[m, d], (0..m * d).map(|k| ((k * 7 + l * 3) % 11) as f64 / 11.0 - 0.5).collect()))
        .collect::<memtrans_core::Result<_>>()?;
    let run = |seq: &[usize]| -> Result<Tensor> {
        let mut pass = Pass::eval();
        pass.memory_override = Some(frozen.clone());
        let enc = model.encode(&mut pass, &TokenGrid::from_sequences(&[seq.to_vec()]))?;
        Ok(pass.tape.value(enc.out).clone())
    };
    let seq: Vec<usize> = (4..4 + n).collect();
    let base = run(&seq)?;
    let (mut leak, mut own_changed) = (0.0f64, true);
    for i in 0..n {
        let mut p = seq.clone();
        p[i] = 13;
        let out = run(&p)?;
        for j in 0..n {
            let diff = base.row(m + j).iter().zip(out.row(m + j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if j == i {
                own_changed &= diff > 0.0;
            } else {
                leak = leak.max(diff);
            }
        }
    }
    Ok((
        leak <= 1e-12 && own_changed,
        format!("max change of other rows {leak:.1e} (<= 1e-12); perturbed row responds {own_changed}"),
    ))
}

fn criterion_4() -> Result<(bool, String)> {
    let lengths = [128, 256, 512, 1024];
    let mut timer = WallTimer::new(3, 32, 4, 32, 1024 + 20);
    let mut time = |v: Variant, n: usize, m: usize| timer.time(v, n, m);
    let report = complexity_bench(
        &[Variant::Baseline, Variant::MemBottleneck],
        &lengths,
        20,
        32,
        Some(&mut time),
        Provenance::default(),
    )?;
    let s = |k: &str| report.summary[k];
    let (ba, bb) = (s("baseline.analytic_slope"), s("mem_bottleneck.analytic_slope"));
    let (wa, wb) = (s("baseline.wall_slope"), s("mem_bottleneck.wall_slope"));
    let pass = (1.90..=2.00).contains(&ba)
        && (0.95..=1.05).contains(&bb)
        && (1.6..=2.4).contains(&wa)
        && (0.7..=1.4).contains(&wb);
    Ok((
        pass,
        format!(
            "analytic slopes baseline {ba:.4} [1.90,2.00], bottleneck {bb:.4} [0.95,1.05]; \
             wall slopes baseline {wa:.3} [1.6,2.4], bottleneck {wb:.3} [0.7,1.4]"
        ),
    ))
}

const VOCAB: usize = 20;
const EVAL_BATCH: usize = 100;

fn copy_stream(dec_mem_ids: Vec<usize>, seed: u64) -> TaskStream {
    TaskStream {
        kind: TaskKind::Copy,
        len_min: 2,
        len_max: 16,
        vocab_size: VOCAB,
        batch_size: 64,
        seed,
        dec_mem_ids,
    }
}

fn learning_config(variant: Variant, m: usize) -> ModelConfig {
    ModelConfig {
        p_drop: 0.1,
        max_len: 64,
        seed: 0,
        ..config(variant, 64, 4, 256, m, m, VOCAB)
    }
}

fn train_config(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 64,
        warmup_steps: 400,
        eval_every: 500,
        seed,
        ..TrainConfig::default()
    }
}

/// Trains to the step budget, evaluating every 500 steps and stopping once
/// token accuracy reaches 0.99. Returns the model, the steps used and the
/// last held-out token accuracy.
fn learn(cfg: ModelConfig, held_out: &[Pair]) -> Result<(Model, u64, f64)> {
    let stream = copy_stream(cfg.dec_mem_ids(), 0);
    let mut trainer = Trainer::new(Model::new(cfg)?, train_config(5000, 0))?;
    let mut acc = 0.0;
    trainer.run(&stream, |t, _| {
        if t.is_eval_step() || t.step == t.config.steps {
            acc = evaluate(&t.model, held_out, EVAL_BATCH)?.token_accuracy;
            if acc >= 0.99 {
                return Ok(Flow::Stop);
            }
        }
        Ok(Flow::Continue)
    })?;
    Ok((trainer.model, trainer.step, acc))
}

fn criterion_6(model: &Model, held_out: &[Pair]) -> Result<(bool, String)> {
    let report = lesion_grid(model, &LESION_SIZES, held_out, EVAL_BATCH, 7, Provenance::default())?;
    eprint!("{}", report.render_table());
    let eval = evaluate(model, held_out, EVAL_BATCH)?;
    let loss = mean_loss(model, held_out, EVAL_BATCH)?;
    let row = report.row("m=10").expect("m=10 row");
    let same = row.metric("token_accuracy") == Some(eval.token_accuracy)
        && row.metric("sequence_accuracy") == Some(eval.sequence_accuracy)
        && row.metric("bleu4") == Some(eval.bleu4)
        && row.metric("loss") == Some(loss);
    let complete = LESION_SIZES.iter().all(|m| report.row(&format!("m={m}")).is_some());
    let accs: Vec<String> = LESION_SIZES
        .iter()
        .map(|m| format!("{m}:{:.4}", report.row(&format!("m={m}")).and_then(|r| r.metric("token_accuracy")).unwrap_or(f64::NAN)))
        .collect();
    Ok((
        complete && same,
        format!("rows {} complete {complete}; m=10 row equals eval bitwise {same}; token accuracy {}", report.rows.len(), accs.join(" ")),
    ))
}

fn criterion_7(model: &Model, held_out: &[Pair]) -> Result<(bool, String)> {
    let lesion = lesion_grid(model, &[15], held_out, EVAL_BATCH, 7, Provenance::default())?;
    let stream = copy_stream(model.config.dec_mem_ids(), 1);
    let zero = extend_memory(model, 5, &train_config(0, 1), &stream, held_out, EVAL_BATCH, 7, Provenance::default())?;
    let exact = zero.report.rows[1].metrics == lesion.row("m=15").expect("m=15 row").metrics;
    let tuned = extend_memory(model, 5, &train_config(200, 1), &stream, held_out, EVAL_BATCH, 7, Provenance::default())?;
    let before = tuned.report.rows[1].metric("loss").unwrap_or(f64::NAN);
    let after = tuned.report.rows[2].metric("loss").unwrap_or(f64::NAN);
    Ok((
        exact && tuned.log.len() == 200 && after <= before,
        format!("+0 steps equals lesion m=15 exactly {exact}; loss {before:.5} -> {after:.5} after {} steps", tuned.log.len()),
    ))
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn criterion_8() -> Result<(bool, String)> {
    let corpus = vec![words("a b c d e f"), words("g h i j k")];
    let identical = corpus_bleu(&corpus, &corpus).score;
    let (m, t) = modified_precision(&words("the the the the the the the"), &words("the cat is on the mat"), 1);
    let hyps = vec![words("the cat is on the red mat"), words("there is a cat on the mat today")];
    let refs = vec![words("the cat is on the mat"), words("a cat is on the mat")];
    let two = corpus_bleu(&hyps, &refs).score;
    let pass = (identical - 100.0).abs() <= 1e-9 && (m, t) == (2, 7) && (two - 43.19414350060099).abs() <= 1e-6;
    Ok((pass, format!("identical {identical}; clipped unigram {m}/{t}; two-sentence corpus {two:.10} (43.1941435006)")))
}

fn criterion_9() -> Result<(bool, String)> {
    let lr = noam_lr(4000, 128, 4000)?;
    Ok(((lr - 0.00139754).abs() <= 1e-8, format!("lr(4000; d=128, warmup=4000) = {lr:.10}")))
}

fn synthetic_records() -> Vec<(AttentionRecord, Vec<Label>, &'static str)> {
    let square = MemoryLayout::new(8, 8);
    let build = |layout: MemoryLayout, cell: &dyn Fn(usize) -> Vec<(usize, f64)>| {
        let t = layout.total();
        let mut w = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for (j, v) in cell(i) {
                w.set(&[i, j], v);
            }
        }
        AttentionRecord::synthetic(Stage::EncSelf, layout, layout, w)
    };
    let spread = |cols: std::ops::Range<usize>| -> Vec<(usize, f64)> {
        let k = cols.len() as f64;
        cols.map(|j| (j, 1.0 / k)).collect()
    };
    let write = MemoryLayout::new(8, 2);
    let read = MemoryLayout::new(2, 8);
    vec![
        (build(square, &|i| vec![(i, 1.0)]), vec![Label::Store], "identity process"),
        (
            build(square, &|i| vec![(if i < 8 { 7 - i } else { i }, 1.0)]),
            vec![Label::CopyReverse],
            "anti-diagonal process",
        ),
        (
            build(write, &|_| spread(write.seq_range())),
            vec![Label::Write],
            "0.8-mass write",
        ),
        (
            build(read, &|i| if i < 2 { spread(read.seq_range()) } else { spread(read.mem_range()) }),
            vec![Label::Read],
            "0.8-mass read",
        ),
        (build(square, &|_| spread(0..16)), vec![Label::Heterogeneous], "uniform"),
        (
            build(square, &|i| vec![(if i < 8 { i + 2 } else { i }, 1.0)]),
            vec![Label::CopyForward],
            "shifted diagonal",
        ),
    ]
}

fn criterion_10() -> Result<(bool, String)> {
    let th = Thresholds::default();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut worst_mass = 0.0f64;
    for (rec, want, name) in synthetic_records() {
        let got = classify(&rec, &th);
        let ok = got == want || (want == [Label::Heterogeneous] && got.is_empty());
        worst_mass = worst_mass.max((quadrant_scores(&rec, th.band).mass_sum() - 1.0).abs());
        pass &= ok;
        let names: Vec<&str> = got.iter().map(|l| l.name()).collect();
        parts.push(format!("{name} {{{}}}", names.join(",")));
    }
    Ok((
        pass && worst_mass <= 1e-9,
        format!("{}; max |mass sum - 1| {worst_mass:.1e}", parts.join("; ")),
    ))
}

fn criterion_11(model: &Model) -> Result<(bool, String)> {
    let ck = Checkpoint::for_model(
        model.clone(),
        Vocab::numeric(VOCAB, 0)?,
        Vocab::numeric(VOCAB, model.config.m_dec)?,
        VocabMode::Word,
    );
    let dir = tempfile::tempdir().expect("temp dir");
    let ck_dir = dir.path().join("checkpoint");
    ck.save(&ck_dir)?;
    let back = Checkpoint::load(&ck_dir)?;
    let pairs = gen_task(TaskKind::Copy, 2, 16, VOCAB, 16, 3)?;
    let batch = Batch::new(&pairs, &model.config.dec_mem_ids());
    let bitwise = logits(model, &batch)? == logits(&back.model, &batch)?;

    let src = vec![5, 3, 9];
    let records = capture_attention(&ck, &src, &src)?;
    let tokens = DumpTokens {
        source: src.iter().map(|&t| ck.vocab_src.token(t).to_string()).collect(),
        target: src.iter().map(|&t| ck.vocab_tgt.token(t).to_string()).collect(),
    };
    let layout = DumpLayout {
        encoder: MemoryLayout::new(model.memory_size(), src.len()),
        decoder: MemoryLayout::new(model.config.m_dec, src.len() + 1),
    };
    let dump_dir = dir.path().join("dump");
    write_dump(&dump_dir, "acceptance", tokens, layout, &records)?;
    let (_, parsed) = read_dump(&dump_dir)?;
    let mut worst = 0.0f64;
    let mut exact_f32 = parsed.len() == records.len();
    for (a, b) in records.iter().zip(&parsed) {
        exact_f32 &= a.weights.shape() == b.weights.shape() && a.row_labels == b.row_labels && a.col_labels == b.col_labels;
        for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
            exact_f32 &= *y == *x as f32 as f64;
            worst = worst.max((x - y).abs());
        }
    }
    Ok((
        bitwise && exact_f32,
        format!(
            "reloaded logits bitwise {bitwise}; {} dump records equal f32-rounded capture {exact_f32} (max abs diff {worst:.1e})",
            records.len()
        ),
    ))
}

fn main() {
    let mut out = Outcome { failed: Vec::new() };
    out.run(1, "gradient suite", criterion_1);
    out.run(2, "reduction equivalences", criterion_2);
    out.run(3, "bottleneck isolation", criterion_3);
    out.run(4, "complexity slopes", criterion_4);

    let held_out = gen_task(TaskKind::Copy, 2, 16, VOCAB, 500, 999).expect("held-out set");
    let start = Instant::now();
    let baseline = learn(learning_config(Variant::Baseline, 0), &held_out);
    let base_time = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mem = learn(learning_config(Variant::Mem, 10), &held_out);
    let mem_time = start.elapsed().as_secs_f64();
    match (&baseline, &mem) {
        (Ok((_, bs, ba)), Ok((_, ms, ma))) => out.report(
            5,
            "learning",
            *ba >= 0.99 && *ma >= 0.99 && *bs <= 5000 && *ms <= 5000,
            format!(
                "baseline token accuracy {ba:.4} after {bs} steps [{base_time:.0}s]; \
                 mem m=10 {ma:.4} after {ms} steps [{mem_time:.0}s]; need >= 0.99 within 5000"
            ),
        ),
        (Err(e), _) | (_, Err(e)) => out.report(5, "learning", false, format!("error: {e}")),
    }

    match &mem {
        Ok((model, _, _)) => {
            out.run(6, "lesion harness", || criterion_6(model, &held_out));
            out.run(7, "extension harness", || criterion_7(model, &held_out));
        }
        Err(_) => {
            out.report(6, "lesion harness", false, "no trained model".into());
            out.report(7, "extension harness", false, "no trained model".into());
        }
    }
    out.run(8, "bleu", criterion_8);
    out.run(9, "noam schedule", criterion_9);
    out.run(10, "analyzer", criterion_10);
    match &mem {
        Ok((model, _, _)) => out.run(11, "persistence", || criterion_11(model)),
        Err(_) => out.report(11, "persistence", false, "no trained model".into()),
    }

    if out.failed.is_empty() {
        println!("acceptance: all 11 criteria PASS");
    } else {
        println!("acceptance: FAIL {:?}", out.failed);
        std::process::exit(1);
    }
}
