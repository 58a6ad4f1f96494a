//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run.

use memtrans_core::data::{gen_task, Batch, TaskKind};
use memtrans_core::models::{BottleneckKv, Model, ModelConfig, Pass, Variant};
use memtrans_core::numerics::gradcheck::{check_inputs, check_params, GradReport};
use memtrans_core::numerics::{AttnBlock, LN_EPS};
use memtrans_core::{Result, Rng, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Values at least 0.2 away from zero, for kinked ops.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let t = random(shape, rng);
    let data = t.data().iter().map(|&x| x + 0.2 * x.signum()).collect();
    Tensor::new(shape, data).unwrap()
}

/// `sum(out * w)` with a fixed random `w`, so every output element matters
/// with a different weight.
fn readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = random(&shape, &mut Rng::new(seed));
    let w = tape.leaf(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub fn op_reports() -> Vec<(String, GradReport)> {
    let mut rng = Rng::new(2024);
    let r = &mut rng;
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        (
            "matmul",
            vec![random(&[3, 4], r), random(&[4, 5], r)],
            Box::new(|t, x| {
                let o = t.matmul(x[0], x[1])?;
                readout(t, o, 1)
            }),
        ),
        (
            "matmul_batched",
            vec![random(&[2, 3, 4], r), random(&[2, 4, 5], r)],
            Box::new(|t, x| {
                let o = t.matmul(x[0], x[1])?;
                readout(t, o, 2)
            }),
        ),
        (
            "matmul_shared_rhs",
            vec![random(&[2, 3, 4], r), random(&[4, 5], r)],
            Box::new(|t, x| {
                let o = t.matmul(x[0], x[1])?;
                readout(t, o, 3)
            }),
        ),
        (
            "linear",
            vec![random(&[3, 4], r), random(&[4, 5], r), random(&[5], r)],
            Box::new(|t, x| {
                let o = t.linear(x[0], x[1], Some(x[2]))?;
                readout(t, o, 4)
            }),
        ),
        (
            "linear_no_bias",
            vec![random(&[3, 4], r), random(&[4, 5], r)],
            Box::new(|t, x| {
                let o = t.linear(x[0], x[1], None)?;
                readout(t, o, 5)
            }),
        ),
        (
            "add",
            vec![random(&[3, 4], r), random(&[3, 4], r)],
            Box::new(|t, x| {
                let o = t.add(x[0], x[1])?;
                readout(t, o, 6)
            }),
        ),
        (
            "mul",
            vec![random(&[3, 4], r), random(&[3, 4], r)],
            Box::new(|t, x| {
                let o = t.mul(x[0], x[1])?;
                readout(t, o, 7)
            }),
        ),
        (
            "scale",
            vec![random(&[3, 4], r)],
            Box::new(|t, x| {
                let o = t.scale(x[0], 0.7);
                readout(t, o, 8)
            }),
        ),
        (
            "sum",
            vec![random(&[3, 4], r)],
            Box::new(|t, x| {
                let s = t.sum(x[0]);
                let sq = t.mul(s, s)?;
                Ok(sq)
            }),
        ),
        (
            "relu",
            vec![off_zero(&[4, 5], r)],
            Box::new(|t, x| {
                let o = t.relu(x[0]);
                readout(t, o, 9)
            }),
        ),
        (
            "softmax_axis0",
            vec![random(&[3, 4], r)],
            Box::new(|t, x| {
                let o = t.softmax(x[0], 0)?;
                readout(t, o, 10)
            }),
        ),
        (
            "softmax_axis1",
            vec![random(&[3, 4], r)],
            Box::new(|t, x| {
                let o = t.softmax(x[0], 1)?;
                readout(t, o, 11)
            }),
        ),
        (
            "softmax_3d_last",
            vec![random(&[2, 3, 4], r)],
            Box::new(|t, x| {
                let o = t.softmax(x[0], 2)?;
                readout(t, o, 12)
            }),
        ),
        (
            "layer_norm",
            vec![random(&[3, 6], r), random(&[6], r), random(&[6], r)],
            Box::new(|t, x| {
                let o = t.layer_norm(x[0], x[1], x[2], LN_EPS)?;
                readout(t, o, 13)
            }),
        ),
        (
            "dropout",
            vec![random(&[4, 5], r)],
            Box::new(|t, x| {
                let o = t.dropout(x[0], 0.3, true, &mut Rng::new(7))?;
                readout(t, o, 14)
            }),
        ),
        (
            "gather_rows",
            vec![random(&[5, 3], r)],
            Box::new(|t, x| {
                let o = t.gather_rows(x[0], &[0, 2, 2, 4])?;
                readout(t, o, 15)
            }),
        ),
        (
            "concat_rows",
            vec![random(&[2, 3], r), random(&[3, 3], r)],
            Box::new(|t, x| {
                let o = t.concat_rows(&[x[0], x[1]])?;
                readout(t, o, 16)
            }),
        ),
        (
            "attention",
            vec![random(&[5, 4], r), random(&[6, 4], r), random(&[6, 4], r)],
            Box::new(|t, x| {
                let causal: Vec<bool> = (0..3).flat_map(|i| (0..3).map(move |j| j <= i)).collect();
                let blocks = vec![
                    AttnBlock {
                        q_start: 0,
                        q_len: 2,
                        k_start: 0,
                        k_len: 3,
                        allowed: None,
                    },
                    AttnBlock {
                        q_start: 2,
                        q_len: 3,
                        k_start: 3,
                        k_len: 3,
                        allowed: Some(causal),
                    },
                ];
                let o = t.attention(x[0], x[1], x[2], 2, blocks)?;
                readout(t, o, 17)
            }),
        ),
        (
            "cross_entropy",
            vec![random(&[4, 6], r)],
            Box::new(|t, x| t.cross_entropy(x[0], &[1, 0, 3, 5], 0)),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name.to_string(), check_inputs(&inputs, f).unwrap()))
        .collect()
}

pub fn grad_config(variant: Variant, kv: BottleneckKv) -> ModelConfig {
    let mem = variant.uses_memory();
    ModelConfig {
        variant,
        n_layers_enc: 2,
        n_layers_dec: 2,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        p_drop: 0.0,
        m_enc: if mem { 3 } else { 0 },
        m_dec: if mem { 2 } else { 0 },
        vocab_src: 12,
        vocab_tgt: 12 + if mem { 2 } else { 0 },
        max_len: 32,
        pe_on_memory: false,
        bottleneck_kv: kv,
        seed: 11,
    }
}

/// End-to-end loss gradients for every variant, `n = 5`.
pub fn variant_reports() -> Vec<(String, GradReport)> {
    let pairs = gen_task(TaskKind::Reverse, 5, 5, 12, 2, 5).unwrap();
    let mut cases: Vec<(String, ModelConfig)> = Variant::ALL
        .iter()
        .map(|&v| (v.name().to_string(), grad_config(v, BottleneckKv::Post)))
        .collect();
    cases.push(("mem_bottleneck(pre)".into(), grad_config(Variant::MemBottleneck, BottleneckKv::Pre)));
    cases
        .into_iter()
        .map(|(name, cfg)| {
            let batch = Batch::new(&pairs, &cfg.dec_mem_ids());
            assert_eq!(batch.src.width, 5);
            let mut model = Model::new(cfg).unwrap();
            let report = check_params(
                &mut model,
                |m| &mut m.params,
                |m| {
                    let mut pass = Pass::eval();
                    let (loss, _) = m.loss(&mut pass, &batch)?;
                    Ok((pass.tape, loss))
                },
            )
            .unwrap();
            (name, report)
        })
        .collect()
}
