use std::fs;

use memtrans::checkpoint::{checkpoint_hash, Checkpoint, DataSpec, OPTIM, PARAMS};
use memtrans::commands::capture_attention;
use memtrans::dump::{read_dump, write_dump, DumpLayout, DumpTokens};
use memtrans::Error;
use memtrans_core::data::{gen_task, Batch, TaskKind, TaskStream, Vocab, VocabMode};
use memtrans_core::models::{BottleneckKv, MemoryLayout, Model, ModelConfig, Pass, Variant};
use memtrans_core::training::{Flow, TrainConfig, Trainer};

fn tiny(variant: Variant) -> ModelConfig {
    let mem = variant.uses_memory();
    ModelConfig {
        variant,
        n_layers_enc: 2,
        n_layers_dec: 1,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        p_drop: 0.1,
        m_enc: if mem { 3 } else { 0 },
        m_dec: if mem { 2 } else { 0 },
        vocab_src: 12,
        vocab_tgt: 12 + if mem { 2 } else { 0 },
        max_len: 64,
        pe_on_memory: false,
        bottleneck_kv: BottleneckKv::Post,
        seed: 3,
    }
}

fn checkpoint_for(cfg: ModelConfig) -> Checkpoint {
    let src = Vocab::numeric(cfg.vocab_src, 0).unwrap();
    let tgt = Vocab::numeric(cfg.vocab_src, cfg.m_dec).unwrap();
    Checkpoint::for_model(Model::new(cfg).unwrap(), src, tgt, VocabMode::Word)
}

fn logits(model: &Model) -> Vec<f64> {
    let pairs = gen_task(TaskKind::Reverse, 2, 6, 12, 4, 8).unwrap();
    let batch = Batch::new(&pairs, &model.config.dec_mem_ids());
    let mut pass = Pass::eval();
    let enc = model.encode(&mut pass, &batch.src).unwrap();
    let dec = model.decode(&mut pass, &batch.tgt_in, &enc).unwrap();
    pass.tape.value(dec.logits).data().to_vec()
}

fn values(model: &Model) -> Vec<Vec<f64>> {
    model.params.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

fn stream(cfg: &ModelConfig) -> TaskStream {
    TaskStream {
        kind: TaskKind::Copy,
        len_min: 2,
        len_max: 6,
        vocab_size: 12,
        batch_size: 4,
        seed: 1,
        dec_mem_ids: cfg.dec_mem_ids(),
    }
}

fn trained(cfg: &ModelConfig, steps: u64) -> Trainer {
    let tc = TrainConfig {
        steps,
        warmup_steps: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Model::new(cfg.clone()).unwrap(), tc).unwrap();
    t.run(&stream(cfg), |_, _| Ok(Flow::Continue)).unwrap();
    t
}

#[test]
fn save_load_reproduces_forward_bitwise_for_every_variant() {
    for v in Variant::ALL {
        let cfg = tiny(v);
        let t = trained(&cfg, 3);
        let mut ck = checkpoint_for(cfg);
        ck.model = t.model.clone();
        ck.adam = Some(t.adam.clone());
        ck.step = t.step;
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(values(&back.model), values(&t.model), "{}", v.name());
        assert_eq!(logits(&back.model), logits(&t.model), "{}", v.name());
        assert_eq!(back.adam.as_ref(), Some(&t.adam));
        assert_eq!(back.step, 3);
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let mut ck = checkpoint_for(tiny(Variant::MemCtrlShared));
    ck.data = Some(DataSpec::Task {
        task: TaskKind::Copy,
        len_min: 2,
        len_max: 6,
        vocab_size: 12,
    });
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ck.save(a.path()).unwrap();
    Checkpoint::load(a.path()).unwrap().save(b.path()).unwrap();
    for f in ["manifest.json", PARAMS, OPTIM] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(checkpoint_hash(a.path()).unwrap(), checkpoint_hash(b.path()).unwrap());
}

#[test]
fn params_bin_is_f32_in_index_order() {
    let ck = checkpoint_for(tiny(Variant::Mem));
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let bytes = fs::read(dir.path().join(PARAMS)).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let index = manifest["params"].as_array().unwrap();
    assert_eq!(index.len(), ck.model.params.len());
    for (entry, (_, p)) in index.iter().zip(ck.model.params.iter()) {
        assert_eq!(entry["name"], p.name.as_str());
        assert_eq!(entry["dtype"], "f32");
        let off = entry["offset"].as_u64().unwrap() as usize;
        let first = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(first, p.value.data()[0] as f32);
    }
    assert_eq!(bytes.len(), 4 * ck.model.params.num_scalars());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = tiny(Variant::MemBottleneck);
    let full = trained(&cfg, 8);

    let half = trained(&cfg, 4);
    let mut ck = checkpoint_for(cfg.clone());
    ck.model = half.model;
    ck.adam = Some(half.adam);
    ck.step = half.step;
    ck.train = Some(half.config);
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let tc = TrainConfig {
        steps: 8,
        ..back.train.clone().unwrap()
    };
    let mut t = Trainer::resume(back.model, back.adam.unwrap(), tc, back.step).unwrap();
    t.run(&stream(&cfg), |_, _| Ok(Flow::Continue)).unwrap();
    assert_eq!(values(&t.model), values(&full.model));
    assert_eq!(t.adam, full.adam);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ck = checkpoint_for(tiny(Variant::Mem));
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let params = dir.path().join(PARAMS);
    let good = fs::read(&params).unwrap();
    fs::write(&params, &good[..good.len() - 4]).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));

    let mut flipped = good.clone();
    flipped[0] ^= 0x40;
    fs::write(&params, &flipped).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));

    fs::write(&params, &good).unwrap();
    fs::write(dir.path().join("manifest.json"), b"{}").unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));
    fs::remove_file(dir.path().join(OPTIM)).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

#[test]
fn dump_round_trips_within_f32_rounding() {
    for v in [Variant::MemCtrl, Variant::MemBottleneck, Variant::Baseline] {
        let ck = checkpoint_for(tiny(v));
        let src = vec![4, 5, 6, 7];
        let tgt = vec![4, 5, 6, 7];
        let records = capture_attention(&ck, &src, &tgt).unwrap();
        assert!(!records.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let tokens = DumpTokens {
            source: vec!["0".into(), "1".into(), "2".into(), "3".into()],
            target: vec![],
        };
        let layout = DumpLayout {
            encoder: MemoryLayout::new(ck.model.memory_size(), 4),
            decoder: MemoryLayout::new(ck.model.config.m_dec, 5),
        };
        let manifest = write_dump(dir.path(), "h", tokens, layout, &records).unwrap();
        assert_eq!(manifest.records.len(), records.len());
        let (m2, back) = read_dump(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!((a.stage, a.layer, a.head, a.rows, a.cols), (b.stage, b.layer, b.head, b.rows, b.cols));
            assert_eq!(a.row_labels, b.row_labels);
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert_eq!(*y, *x as f32 as f64);
                assert!((x - y).abs() <= x.abs() * f32::EPSILON as f64);
            }
        }
    }
}

#[test]
fn captured_labels_use_vocabulary_tokens() {
    let ck = checkpoint_for(tiny(Variant::Mem));
    let records = capture_attention(&ck, &[4, 5], &[6]).unwrap();
    let enc = records.iter().find(|r| r.stage.name() == "enc_self").unwrap();
    assert_eq!(enc.col_labels, ["[mem]0", "[mem]1", "[mem]2", "0", "1"]);
}

#[test]
fn malformed_dumps_are_rejected() {
    let ck = checkpoint_for(tiny(Variant::Mem));
    let records = capture_attention(&ck, &[4, 5], &[6]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let layout = DumpLayout {
        encoder: MemoryLayout::new(3, 2),
        decoder: MemoryLayout::new(2, 2),
    };
    let tokens = DumpTokens {
        source: vec![],
        target: vec![],
    };
    let m = write_dump(dir.path(), "h", tokens, layout, &records).unwrap();
    let f = dir.path().join(&m.records[0].file);
    let bytes = fs::read(&f).unwrap();
    fs::write(&f, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_dump(dir.path()), Err(Error::Format { .. })));
}
