//! Desk-scale models used by tests, the CLI, and the examples: a small MLP,
//! a single-head attention block with an exposed K-cache, a dynamically
//! quantized MLP, a graph that averages over the batch, and a deep stack of
//! attention layers.
//!
//! Every fixture has a symbolic `batch` dimension on axis 0 and comes with
//! the batching config that declares it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checker::BatchingConfig;
use crate::graph::builder::{int, ints, GraphBuilder};
use crate::graph::{Dim, GraphModel};
use crate::tensor::json::TensorMap;
use crate::tensor::{DType, TensorValue};

pub const TOY_SEQ: usize = 4;
pub const TOY_EMBED: usize = 8;
pub const TOY_HEAD: usize = 8;
pub const TOY_VOCAB: usize = 6;

/// Name of the toy attention block's K-cache output, `[batch, 1, seq, head]`.
pub const PRESENT_KEY: &str = "present_key";
/// Hidden state after the attention residual, `[batch, seq, embed]`.
pub const HIDDEN: &str = "hidden";
pub const LOGITS: &str = "logits";

fn batch_dims(rest: &[usize]) -> Vec<Dim> {
    let mut d = vec![Dim::Symbolic("batch".into())];
    d.extend(rest.iter().map(|&n| Dim::Fixed(n)));
    d
}

struct Weights(ChaCha8Rng);

impl Weights {
    fn new(seed: u64) -> Self {
        Weights(ChaCha8Rng::seed_from_u64(seed))
    }

    fn tensor(&mut self, shape: &[usize], scale: f32) -> TensorValue {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.gen_range(-scale..scale)).collect();
        TensorValue::from_f32(shape, data).expect("shape matches data")
    }
}

fn mlp_model(name: &str, mix_batch: bool) -> (GraphModel, BatchingConfig) {
    let mut w = Weights::new(11);
    let mut b = GraphBuilder::new(name);
    let x = b.input("x", DType::Float32, batch_dims(&[4]));
    let w1 = b.constant("w1", w.tensor(&[4, 8], 0.5));
    let b1 = b.constant("b1", w.tensor(&[8], 0.1));
    let w2 = b.constant("w2", w.tensor(&[8, 3], 0.5));
    let b2 = b.constant("b2", w.tensor(&[3], 0.1));
    let h = b.node("MatMul", &[&x, &w1], vec![]);
    let h = b.node("Add", &[&h, &b1], vec![]);
    let mut h = b.node("Relu", &[&h], vec![]);
    if mix_batch {
        let mean = b.node("ReduceMean", &[&h], vec![("axes", ints(&[0])), ("keepdims", int(1))]);
        b.model_mut().nodes.last_mut().expect("just pushed").name = "batch_mean".into();
        h = b.node("Add", &[&h, &mean], vec![]);
    }
    let y = b.node("MatMul", &[&h, &w2], vec![]);
    let y = b.node("Add", &[&y, &b2], vec![]);
    let y = b.rename(&y, "y");
    b.output(&y, DType::Float32, batch_dims(&[3]));
    let config = BatchingConfig::new(2).batched_input("x", 0).batched_output("y", 0);
    (b.finish().expect("fixture is well formed"), config)
}

/// `x [batch,4] -> Linear(8) -> Relu -> Linear(3) -> y`.
pub fn mlp() -> (GraphModel, BatchingConfig) {
    mlp_model("mlp", false)
}

/// The MLP with the hidden layer's batch mean added back in, the classic
/// training-mode normalization mistake. The mean node is `batch_mean`.
pub fn batch_mixing_reduce() -> (GraphModel, BatchingConfig) {
    mlp_model("batch_mixing_reduce", true)
}

/// One attention block appended to `b`, reading `x [batch,seq,embed]`.
/// Returns (present_key, block output).
fn attention_block(
    b: &mut GraphBuilder,
    w: &mut Weights,
    x: &str,
    seq: usize,
    embed: usize,
    head: usize,
) -> (String, String) {
    let wq = b.constant("wq", w.tensor(&[embed, head], 0.5));
    let wk = b.constant("wk", w.tensor(&[embed, head], 0.5));
    let wv = b.constant("wv", w.tensor(&[embed, head], 0.5));
    let wo = b.constant("wo", w.tensor(&[head, embed], 0.5));
    let scale = b.constant("scale", TensorValue::scalar_f32(1.0 / (head as f32).sqrt()));
    let mut mask = vec![0.0f32; seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            mask[i * seq + j] = -1e9;
        }
    }
    let mask = b.constant("causal_mask", TensorValue::from_f32(&[seq, seq], mask).expect("square"));
    let axis1 = b.constant("axis1", TensorValue::vec_i64(&[1]));

    let q = b.node("MatMul", &[x, &wq], vec![]);
    let k = b.node("MatMul", &[x, &wk], vec![]);
    let v = b.node("MatMul", &[x, &wv], vec![]);
    let q = b.node("Unsqueeze", &[&q, &axis1], vec![]);
    let present = b.node("Unsqueeze", &[&k, &axis1], vec![]);
    let v = b.node("Unsqueeze", &[&v, &axis1], vec![]);
    let kt = b.node("Transpose", &[&present], vec![("perm", ints(&[0, 1, 3, 2]))]);
    let scores = b.node("MatMul", &[&q, &kt], vec![]);
    let scores = b.node("Mul", &[&scores, &scale], vec![]);
    let scores = b.node("Add", &[&scores, &mask], vec![]);
    let probs = b.node("Softmax", &[&scores], vec![("axis", int(-1))]);
    let ctx = b.node("MatMul", &[&probs, &v], vec![]);
    let ctx = b.node("Squeeze", &[&ctx, &axis1], vec![]);
    let out = b.node("MatMul", &[&ctx, &wo], vec![]);
    let out = b.node("Add", &[x, &out], vec![]);
    (present, out)
}

/// Single-head causal attention over `x [batch,4,8]` with a residual and a
/// vocabulary projection. Outputs `logits [batch,4,6]` and the K-cache
/// `present_key [batch,1,4,8]`; the post-attention hidden state is the
/// tensor `hidden`.
pub fn toy_attention() -> (GraphModel, BatchingConfig) {
    let mut w = Weights::new(7);
    let mut b = GraphBuilder::new("toy_attention");
    let x = b.input("x", DType::Float32, batch_dims(&[TOY_SEQ, TOY_EMBED]));
    let (present, hidden) = attention_block(&mut b, &mut w, &x, TOY_SEQ, TOY_EMBED, TOY_HEAD);
    let present = b.rename(&present, PRESENT_KEY);
    let hidden = b.rename(&hidden, HIDDEN);
    let wlm = b.constant("lm_head", w.tensor(&[TOY_EMBED, TOY_VOCAB], 0.5));
    let logits = b.node("MatMul", &[&hidden, &wlm], vec![]);
    let logits = b.rename(&logits, LOGITS);
    b.output(&logits, DType::Float32, batch_dims(&[TOY_SEQ, TOY_VOCAB]));
    b.output(&present, DType::Float32, batch_dims(&[1, TOY_SEQ, TOY_HEAD]));
    let config = BatchingConfig::new(2)
        .batched_input("x", 0)
        .batched_output(LOGITS, 0)
        .batched_output(PRESENT_KEY, 0);
    (b.finish().expect("fixture is well formed"), config)
}

/// The toy attention block's key projection.
fn toy_key_weights() -> TensorValue {
    let (m, _) = toy_attention();
    m.initializers["wk"].clone()
}

/// Token embedding that drives the K-cache prefix sum far from anything
/// random inputs in [-1, 1) produce: every component has magnitude 3 and the
/// sign of the matching row sum of the key projection.
pub fn trigger_embedding() -> Vec<f32> {
    let wk = toy_key_weights();
    let wk = wk.as_f32().expect("float weights");
    (0..TOY_EMBED)
        .map(|e| {
            let s: f32 = (0..TOY_HEAD).map(|h| wk[[e, h]]).sum();
            if s >= 0.0 {
                3.0
            } else {
                -3.0
            }
        })
        .collect()
}

/// Random toy attention inputs for `batch` users; when `trigger_at` is set,
/// that user's tokens at `positions` are replaced by the trigger embedding.
pub fn toy_attention_inputs(batch: usize, seed: u64, trigger_at: Option<(usize, &[usize])>) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * TOY_SEQ * TOY_EMBED;
    let mut data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    if let Some((user, positions)) = trigger_at {
        let emb = trigger_embedding();
        for &p in positions {
            let at = (user * TOY_SEQ + p) * TOY_EMBED;
            data[at..at + TOY_EMBED].copy_from_slice(&emb);
        }
    }
    let x = TensorValue::from_f32(&[batch, TOY_SEQ, TOY_EMBED], data).expect("shape matches data");
    TensorMap::from([("x".to_string(), x)])
}

/// `x [batch,4]` quantized with DynamicQuantizeLinear, dequantized, then a
/// linear layer. The quantization scale is computed over the whole tensor,
/// batch axis included, so every output element depends on every user.
pub fn dynquant_mlp() -> (GraphModel, BatchingConfig) {
    let mut w = Weights::new(5);
    let mut b = GraphBuilder::new("dynquant_mlp");
    let x = b.input("x", DType::Float32, batch_dims(&[4]));
    let wt = b.constant("w", w.tensor(&[4, 3], 0.5));
    let bias = b.constant("b", w.tensor(&[3], 0.1));
    let q = b.node_multi("DynamicQuantizeLinear", &[&x], 3, vec![]);
    b.model_mut().nodes.last_mut().expect("just pushed").name = "quantize".into();
    let d = b.node("DequantizeLinear", &[&q[0], &q[1], &q[2]], vec![]);
    let y = b.node("MatMul", &[&d, &wt], vec![]);
    let y = b.node("Add", &[&y, &bias], vec![]);
    let y = b.rename(&y, "y");
    b.output(&y, DType::Float32, batch_dims(&[3]));
    let config = BatchingConfig::new(2).batched_input("x", 0).batched_output("y", 0);
    (b.finish().expect("fixture is well formed"), config)
}

/// `layers` pre-norm attention blocks with MLPs over `x [batch,16,32]`,
/// 24 nodes per layer plus the head; eight layers give 194 nodes.
pub fn stacked_attention(layers: usize) -> (GraphModel, BatchingConfig) {
    const SEQ: usize = 16;
    const EMBED: usize = 32;
    let mut w = Weights::new(3);
    let mut b = GraphBuilder::new("stacked_attention");
    let x = b.input("x", DType::Float32, batch_dims(&[SEQ, EMBED]));
    let eps = b.constant("eps", TensorValue::scalar_f32(1e-5));
    let mut h = x;
    for _ in 0..layers {
        // RMS-style norm: x / sqrt(mean(x*x) + eps)
        let sq = b.node("Mul", &[&h, &h], vec![]);
        let ms = b.node("ReduceMean", &[&sq], vec![("axes", ints(&[-1])), ("keepdims", int(1))]);
        let ms = b.node("Add", &[&ms, &eps], vec![]);
        let rms = b.node("Sqrt", &[&ms], vec![]);
        let normed = b.node("Div", &[&h, &rms], vec![]);
        let (_, attn) = attention_block(&mut b, &mut w, &normed, SEQ, EMBED, EMBED);
        let w1 = b.constant("ff1", w.tensor(&[EMBED, 2 * EMBED], 0.3));
        let w2 = b.constant("ff2", w.tensor(&[2 * EMBED, EMBED], 0.3));
        let f = b.node("MatMul", &[&attn, &w1], vec![]);
        let f = b.node("Relu", &[&f], vec![]);
        let f = b.node("MatMul", &[&f, &w2], vec![]);
        h = b.node("Add", &[&attn, &f], vec![]);
    }
    let head = b.constant("head", w.tensor(&[EMBED, 8], 0.3));
    let logits = b.node("MatMul", &[&h, &head], vec![]);
    let probs = b.node("Softmax", &[&logits], vec![("axis", int(-1))]);
    let probs = b.rename(&probs, "probs");
    b.output(&probs, DType::Float32, batch_dims(&[SEQ, 8]));
    let config = BatchingConfig::new(2).batched_input("x", 0).batched_output("probs", 0);
    (b.finish().expect("fixture is well formed"), config)
}
