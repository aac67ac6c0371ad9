//! Random graph generation and the soundness harness that pits the checker
//! against the probe: a graph the checker calls safe must never show
//! interference.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::probe::{probe, ProbeOptions, Witness};
use crate::checker::{BatchingConfig, Checker, OutputSpec};
use crate::error::Result;
use crate::graph::builder::{float, int, ints, GraphBuilder};
use crate::graph::{infer_shapes, validate_support, Attribute, Dim, GraphModel};
use crate::rules::RuleSet;
use crate::tensor::{DType, TensorValue};

/// Which operators the generator may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OpPool {
    /// Every supported deterministic operator.
    Full,
    /// Shape-preserving elementwise operators only.
    Elementwise,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphParams {
    /// Longest input-to-output chain of nodes.
    pub max_depth: usize,
    pub pool: OpPool,
    pub batch_size: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            max_depth: 8,
            pool: OpPool::Full,
            batch_size: 2,
        }
    }
}

/// A generated graph with its batching layout.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub seed: u64,
    pub model: GraphModel,
    pub config: BatchingConfig,
}

#[derive(Debug, Clone)]
pub struct FuzzOptions {
    pub graphs: usize,
    pub trials: usize,
    pub seed: u64,
    pub params: GraphParams,
    /// Rules handed to the checker; replaceable to test the harness itself.
    pub rules: RuleSet,
    /// Also probe graphs the checker flags, to count confirmed leaks.
    pub probe_leaks: bool,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        FuzzOptions {
            graphs: 500,
            trials: 20,
            seed: 0,
            params: GraphParams::default(),
            rules: RuleSet::new(),
            probe_leaks: false,
        }
    }
}

/// A graph the checker certified safe on which the probe found interference.
#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub graph: usize,
    pub seed: u64,
    pub nodes: usize,
    pub witness: Witness,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FuzzSummary {
    pub graphs: usize,
    pub safe: usize,
    pub leak: usize,
    /// Flagged graphs on which the probe also found interference.
    pub confirmed_leaks: usize,
    pub nodes: usize,
    pub trials_run: usize,
    pub discarded_trials: usize,
    pub counterexamples: Vec<Counterexample>,
}

impl FuzzSummary {
    pub fn is_sound(&self) -> bool {
        self.counterexamples.is_empty()
    }
}

/// Seed of graph `index` in a run seeded `seed`.
pub fn graph_seed(seed: u64, index: usize) -> u64 {
    super::node_seed(seed, index, None)
}

struct GraphOutcome {
    safe: bool,
    nodes: usize,
    interfered: bool,
    trials_run: usize,
    discarded: usize,
    witness: Option<Witness>,
}

fn run_one(index: usize, options: &FuzzOptions) -> Result<GraphOutcome> {
    let seed = graph_seed(options.seed, index);
    let g = random_graph(seed, &options.params);
    let verdict = Checker::new()
        .with_rules(options.rules.clone())
        .check(&g.model, &g.config)?;
    let safe = verdict.is_safe();
    let mut out = GraphOutcome {
        safe,
        nodes: g.model.nodes.len(),
        interfered: false,
        trials_run: 0,
        discarded: 0,
        witness: None,
    };
    if safe || options.probe_leaks {
        let report = probe(
            &g.model,
            &g.config,
            &ProbeOptions {
                trials: options.trials,
                seed,
                base_inputs: None,
            },
        )?;
        out.interfered = report.interfered;
        out.trials_run = report.trials_run;
        out.discarded = report.discarded_trials;
        out.witness = report.witness;
    }
    Ok(out)
}

/// Generate `options.graphs` graphs, check each, and probe the safe ones.
/// Graphs run in parallel; the summary is independent of scheduling.
pub fn fuzz_soundness(options: &FuzzOptions) -> Result<FuzzSummary> {
    let outcomes: Vec<Result<GraphOutcome>> = (0..options.graphs)
        .into_par_iter()
        .map(|i| run_one(i, options))
        .collect();
    let mut summary = FuzzSummary::default();
    for (i, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        summary.graphs += 1;
        summary.nodes += o.nodes;
        summary.trials_run += o.trials_run;
        summary.discarded_trials += o.discarded;
        if o.safe {
            summary.safe += 1;
            if let Some(witness) = o.witness {
                tracing::error!(graph = i, "checker certified a graph the probe shows interfering");
                summary.counterexamples.push(Counterexample {
                    graph: i,
                    seed: graph_seed(options.seed, i),
                    nodes: o.nodes,
                    witness,
                });
            }
        } else {
            summary.leak += 1;
            summary.confirmed_leaks += o.interfered as usize;
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Unary,
    BinaryConst,
    BinaryPair,
    Select,
    MatMulConst,
    MatMulPair,
    Gemm,
    Conv,
    Reduce,
    Softmax,
    Transpose,
    Reshape,
    ReshapeLike,
    Flatten,
    Unsqueeze,
    Squeeze,
    Concat,
    Split,
    Slice,
    Expand,
    GatherConst,
    GatherData,
    GatherElements,
    GatherElementsData,
    ScatterConst,
    ScatterData,
    ConstantOfShape,
    Size,
    Quantize,
    IntRoundTrip,
}

/// Operators with draw weights. Those that always mix the batch are drawn
/// less often so a good share of graphs stay isolated and get probed.
const ELEMENTWISE: &[(Op, u32)] = &[
    (Op::Unary, 3),
    (Op::BinaryConst, 3),
    (Op::BinaryPair, 3),
    (Op::Select, 2),
];

const FULL: &[(Op, u32)] = &[
    (Op::Unary, 6),
    (Op::BinaryConst, 6),
    (Op::BinaryPair, 4),
    (Op::Select, 3),
    (Op::MatMulConst, 3),
    (Op::MatMulPair, 2),
    (Op::Gemm, 2),
    (Op::Conv, 3),
    (Op::Reduce, 3),
    (Op::Softmax, 3),
    (Op::Transpose, 3),
    (Op::Reshape, 2),
    (Op::ReshapeLike, 2),
    (Op::Flatten, 2),
    (Op::Unsqueeze, 2),
    (Op::Squeeze, 2),
    (Op::Concat, 2),
    (Op::Split, 2),
    (Op::Slice, 3),
    (Op::Expand, 2),
    (Op::GatherConst, 3),
    (Op::GatherData, 1),
    (Op::GatherElements, 2),
    (Op::GatherElementsData, 3),
    (Op::ScatterConst, 2),
    (Op::ScatterData, 1),
    (Op::ConstantOfShape, 2),
    (Op::Size, 2),
    (Op::Quantize, 1),
    (Op::IntRoundTrip, 2),
];

#[derive(Debug, Clone)]
struct Avail {
    name: String,
    shape: Vec<usize>,
    nonneg: bool,
}

struct Gen<'a> {
    b: GraphBuilder,
    rng: ChaCha8Rng,
    params: &'a GraphParams,
    pool: Vec<Avail>,
    depth: HashMap<String, usize>,
}

impl Gen<'_> {
    fn pick(&mut self) -> Avail {
        let max = self.params.max_depth;
        let ok: Vec<&Avail> = self
            .pool
            .iter()
            .filter(|a| self.depth.get(&a.name).copied().unwrap_or(0) < max)
            .collect();
        (*ok.choose(&mut self.rng).expect("inputs are always available")).clone()
    }

    fn pick_where(&mut self, pred: impl Fn(&Avail) -> bool) -> Option<Avail> {
        let max = self.params.max_depth;
        let ok: Vec<&Avail> = self
            .pool
            .iter()
            .filter(|a| self.depth.get(&a.name).copied().unwrap_or(0) < max && pred(a))
            .collect();
        ok.choose(&mut self.rng).map(|a| (*a).clone())
    }

    /// A partner for `a` with exactly the same shape (possibly `a` itself).
    fn same_shape(&mut self, a: &Avail) -> Avail {
        let shape = a.shape.clone();
        self.pick_where(|t| t.shape == shape).unwrap_or_else(|| a.clone())
    }

    fn values(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    /// Values with magnitude in [0.5, 2) and random sign.
    fn nonzero(&mut self, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let m = self.rng.gen_range(0.5f32..2.0);
                if self.rng.gen() {
                    m
                } else {
                    -m
                }
            })
            .collect()
    }

    fn const_f32(&mut self, shape: &[usize], data: Vec<f32>) -> String {
        let v = TensorValue::from_f32(shape, data).expect("shape matches data");
        self.b.constant("c", v)
    }

    fn const_i64(&mut self, shape: &[usize], data: Vec<i64>) -> String {
        let v = TensorValue::from_i64(shape, data).expect("shape matches data");
        self.b.constant("k", v)
    }

    /// A constant shape broadcastable onto `shape` without enlarging it.
    fn broadcast_shape(&mut self, shape: &[usize]) -> Vec<usize> {
        match self.rng.gen_range(0..4) {
            0 => vec![],
            1 => shape.last().map(|&d| vec![d]).unwrap_or_default(),
            2 if !shape.is_empty() => {
                let mut s = shape.to_vec();
                s[0] = 1;
                s
            }
            _ => shape.to_vec(),
        }
    }

    /// An axis of a rank-`rank` tensor, usually not the leading (batch) one.
    fn axis(&mut self, rank: usize, ok: impl Fn(usize) -> bool) -> Option<usize> {
        let all: Vec<usize> = (0..rank).filter(|&i| ok(i)).collect();
        let inner: Vec<usize> = all.iter().copied().filter(|&i| i > 0).collect();
        let from = if !inner.is_empty() && self.rng.gen_bool(0.75) {
            &inner
        } else {
            &all
        };
        from.choose(&mut self.rng).copied()
    }

    /// Integer 0 or 1 computed from the data of a random tensor.
    fn data_bit(&mut self) -> String {
        let u = self.pick();
        let m = self.b.node("ReduceMax", &[&u.name], vec![("keepdims", int(0))]);
        let t = self.rng.gen_range(-0.5f32..0.5);
        let c = self.const_f32(&[], vec![t]);
        let g = self.b.node("Greater", &[&m, &c], vec![]);
        self.b
            .node("Cast", &[&g], vec![("to", int(DType::Int64.onnx_code() as i64))])
    }

    fn emit(&mut self, op: Op) -> Option<Vec<(String, bool)>> {
        let elementwise_only = self.params.pool == OpPool::Elementwise;
        let out = match op {
            Op::Unary => {
                let a = self.pick();
                let mut ops = vec!["Neg", "Relu", "Sigmoid", "Tanh", "Sin", "Exp"];
                if a.nonneg {
                    ops.push("Sqrt");
                }
                let op = *ops.choose(&mut self.rng).unwrap();
                let y = self.b.node(op, &[&a.name], vec![]);
                let nonneg = matches!(op, "Relu" | "Sigmoid" | "Exp" | "Sqrt");
                vec![(y, nonneg)]
            }
            Op::BinaryConst => {
                let a = self.pick();
                let op = *["Add", "Sub", "Mul", "Div"].choose(&mut self.rng).unwrap();
                let shape = self.broadcast_shape(&a.shape);
                let n = shape.iter().product();
                let data = match op {
                    // Zero factors are excluded: see the ledger on signed zeros.
                    "Mul" | "Div" => self.nonzero(n),
                    _ => self.values(n, -1.0, 1.0),
                };
                let c = self.const_f32(&shape, data);
                let y = if op != "Div" && self.rng.gen() {
                    self.b.node(op, &[&c, &a.name], vec![])
                } else {
                    self.b.node(op, &[&a.name, &c], vec![])
                };
                vec![(y, false)]
            }
            Op::BinaryPair => {
                let a = self.pick();
                let other = if elementwise_only || self.rng.gen_bool(0.7) {
                    self.same_shape(&a)
                } else {
                    self.pick()
                };
                let op = *["Add", "Sub", "Mul", "Div"].choose(&mut self.rng).unwrap();
                vec![(self.b.node(op, &[&a.name, &other.name], vec![]), false)]
            }
            Op::Select => {
                let a = self.pick();
                let b = self.same_shape(&a);
                let c = self.same_shape(&a);
                let cmp = *["Greater", "Less", "GreaterOrEqual", "LessOrEqual"]
                    .choose(&mut self.rng)
                    .unwrap();
                let mut cond = self.b.node(cmp, &[&a.name, &b.name], vec![]);
                if self.rng.gen_bool(0.3) {
                    let z = self.const_f32(&[], vec![0.0]);
                    let other = self.b.node("Greater", &[&c.name, &z], vec![]);
                    let join = *["And", "Or"].choose(&mut self.rng).unwrap();
                    cond = self.b.node(join, &[&cond, &other], vec![]);
                }
                if self.rng.gen_bool(0.2) {
                    cond = self.b.node("Not", &[&cond], vec![]);
                }
                vec![(self.b.node("Where", &[&cond, &a.name, &c.name], vec![]), false)]
            }
            Op::MatMulConst => {
                let a = self.pick_where(|t| !t.shape.is_empty())?;
                let k = *a.shape.last().unwrap();
                let n = self.rng.gen_range(1..=4);
                let data = self.values(k * n, -1.0, 1.0);
                let w = self.const_f32(&[k, n], data);
                vec![(self.b.node("MatMul", &[&a.name, &w], vec![]), false)]
            }
            Op::MatMulPair => {
                let a = self.pick_where(|t| t.shape.len() >= 2)?;
                let r = a.shape.len() as i64;
                let mut perm: Vec<i64> = (0..r).collect();
                perm.swap(r as usize - 1, r as usize - 2);
                let t = self.b.node("Transpose", &[&a.name], vec![("perm", ints(&perm))]);
                let y = if self.rng.gen() {
                    self.b.node("MatMul", &[&a.name, &t], vec![])
                } else {
                    self.b.node("MatMul", &[&t, &a.name], vec![])
                };
                vec![(y, false)]
            }
            Op::Gemm => {
                let a = self.pick_where(|t| t.shape.len() == 2)?;
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = self.rng.gen_range(1..=4);
                let trans_b = self.rng.gen_bool(0.5);
                let wshape = if trans_b { [n, k] } else { [k, n] };
                let data = self.values(k * n, -1.0, 1.0);
                let w = self.const_f32(&wshape, data);
                let cshape = [vec![n], vec![m, n], vec![]].choose(&mut self.rng).unwrap().clone();
                let cdata = self.values(cshape.iter().product(), -1.0, 1.0);
                let c = self.const_f32(&cshape, cdata);
                let alpha = self.rng.gen_range(0.5f32..1.5);
                let y = self.b.node(
                    "Gemm",
                    &[&a.name, &w, &c],
                    vec![("transB", int(trans_b as i64)), ("alpha", float(alpha))],
                );
                vec![(y, false)]
            }
            Op::Conv => {
                let a = self.pick_where(|t| t.shape.len() == 4 && t.shape[2] >= 3 && t.shape[3] >= 3)?;
                let c = a.shape[1];
                let group = if c > 1 && self.rng.gen_bool(0.3) { c } else { 1 };
                let m = group * self.rng.gen_range(1..=2);
                let k = *[1usize, 3].choose(&mut self.rng).unwrap();
                let wshape = [m, c / group, k, k];
                let data = self.values(wshape.iter().product(), -1.0, 1.0);
                let w = self.const_f32(&wshape, data);
                let pad = self.rng.gen_range(0..=k as i64 / 2);
                let stride = self.rng.gen_range(1..=2);
                let mut inputs = vec![a.name.clone(), w];
                if self.rng.gen() {
                    let bias = self.values(m, -1.0, 1.0);
                    inputs.push(self.const_f32(&[m], bias));
                }
                let refs: Vec<&str> = inputs.iter().map(|s| s.as_str()).collect();
                let y = self.b.node(
                    "Conv",
                    &refs,
                    vec![
                        ("pads", ints(&[pad; 4])),
                        ("strides", ints(&[stride; 2])),
                        ("group", int(group as i64)),
                    ],
                );
                vec![(y, false)]
            }
            Op::Reduce => {
                let a = self.pick_where(|t| !t.shape.is_empty())?;
                let op = *["ReduceSum", "ReduceMax", "ReduceMean"].choose(&mut self.rng).unwrap();
                let r = a.shape.len();
                let first = self.axis(r, |_| true)? as i64;
                let mut axes: Vec<i64> = (1..r as i64)
                    .filter(|&i| i != first && self.rng.gen_bool(0.3))
                    .collect();
                axes.push(first);
                axes.sort_unstable();
                let keep = int(self.rng.gen_bool(0.5) as i64);
                let y = if op == "ReduceSum" {
                    let ax = self.const_i64(&[axes.len()], axes);
                    self.b.node(op, &[&a.name, &ax], vec![("keepdims", keep)])
                } else {
                    self.b
                        .node(op, &[&a.name], vec![("axes", ints(&axes)), ("keepdims", keep)])
                };
                vec![(y, false)]
            }
            Op::Softmax => {
                let a = self.pick_where(|t| !t.shape.is_empty())?;
                let r = a.shape.len();
                let axis = self.axis(r, |_| true)? as i64 - if self.rng.gen() { r as i64 } else { 0 };
                vec![(self.b.node("Softmax", &[&a.name], vec![("axis", int(axis))]), true)]
            }
            Op::Transpose => {
                let a = self.pick_where(|t| t.shape.len() >= 2)?;
                let mut perm: Vec<i64> = (0..a.shape.len() as i64).collect();
                if self.rng.gen_bool(0.75) {
                    perm[1..].shuffle(&mut self.rng);
                } else {
                    perm.shuffle(&mut self.rng);
                }
                vec![(
                    self.b.node("Transpose", &[&a.name], vec![("perm", ints(&perm))]),
                    a.nonneg,
                )]
            }
            Op::Reshape => {
                let a = self.pick_where(|t| !t.shape.is_empty())?;
                let last = *a.shape.last().unwrap() as i64;
                let target: Vec<i64> = match self.rng.gen_range(0..3) {
                    0 => vec![-1],
                    1 => vec![a.shape[0] as i64, -1],
                    _ if last % 2 == 0 => {
                        let mut s: Vec<i64> = a.shape.iter().map(|&d| d as i64).collect();
                        *s.last_mut().unwrap() = 2;
                        s.push(last / 2);
                        s[0] = 0;
                        s
                    }
                    _ => vec![-1, last],
                };
                let shape = self.const_i64(&[target.len()], target);
                vec![(self.b.node("Reshape", &[&a.name, &shape], vec![]), a.nonneg)]
            }
            Op::ReshapeLike => {
                let a = self.pick();
                let n: usize = a.shape.iter().product();
                let like = self.pick_where(|t| t.shape.iter().product::<usize>() == n && t.shape != a.shape)?;
                let s = self.b.node("Shape", &[&like.name], vec![]);
                vec![(self.b.node("Reshape", &[&a.name, &s], vec![]), a.nonneg)]
            }
            Op::Flatten => {
                let a = self.pick();
                let axis = self.rng.gen_range(0..=a.shape.len() as i64);
                vec![(self.b.node("Flatten", &[&a.name], vec![("axis", int(axis))]), a.nonneg)]
            }
            Op::Unsqueeze => {
                let a = self.pick_where(|t| t.shape.len() < 5)?;
                let axis = self.rng.gen_range(0..=a.shape.len() as i64);
                let ax = self.const_i64(&[1], vec![axis]);
                vec![(self.b.node("Unsqueeze", &[&a.name, &ax], vec![]), a.nonneg)]
            }
            Op::Squeeze => {
                let a = self.pick_where(|t| t.shape.contains(&1))?;
                let ones: Vec<i64> = (0..a.shape.len())
                    .filter(|&i| a.shape[i] == 1)
                    .map(|i| i as i64)
                    .collect();
                let y = if self.rng.gen() {
                    self.b.node("Squeeze", &[&a.name], vec![])
                } else {
                    let axis = *ones.choose(&mut self.rng).unwrap();
                    let ax = self.const_i64(&[1], vec![axis]);
                    self.b.node("Squeeze", &[&a.name, &ax], vec![])
                };
                vec![(y, a.nonneg)]
            }
            Op::Concat => {
                let a = self.pick_where(|t| !t.shape.is_empty())?;
                let b = self.same_shape(&a);
                let axis = self.axis(a.shape.len(), |_| true)? as i64;
                vec![(
                    self.b.node("Concat", &[&a.name, &b.name], vec![("axis", int(axis))]),
                    false,
                )]
            }
            Op::Split => {
                let a = self.pick_where(|t| t.shape.iter().any(|&d| d >= 2))?;
                let shape = a.shape.clone();
                let axis = self.axis(shape.len(), |i| shape[i] >= 2)?;
                let d = a.shape[axis] as i64;
                let first = self.rng.gen_range(1..d);
                let sizes = self.const_i64(&[2], vec![first, d - first]);
                let outs = self
                    .b
                    .node_multi("Split", &[&a.name, &sizes], 2, vec![("axis", int(axis as i64))]);
                outs.into_iter().map(|o| (o, a.nonneg)).collect()
            }
            Op::Slice => {
                let a = self.pick_where(|t| t.shape.iter().any(|&d| d >= 2))?;
                let shape = a.shape.clone();
                let axis = self.axis(shape.len(), |i| shape[i] >= 2)?;
                let d = a.shape[axis] as i64;
                let (start, end, step) = if self.rng.gen_bool(0.25) {
                    (-1, -d - 1, -1)
                } else {
                    let s = self.rng.gen_range(0..d);
                    (s, self.rng.gen_range(s + 1..=d), 1)
                };
                let names: Vec<String> = [start, end, axis as i64, step]
                    .iter()
                    .map(|&v| self.const_i64(&[1], vec![v]))
                    .collect();
                let y = self
                    .b
                    .node("Slice", &[&a.name, &names[0], &names[1], &names[2], &names[3]], vec![]);
                vec![(y, a.nonneg)]
            }
            Op::Expand => {
                let a = self.pick();
                let mut target: Vec<i64> = a.shape.iter().map(|&d| d as i64).collect();
                match a.shape.iter().position(|&d| d == 1) {
                    Some(i) if self.rng.gen() => target[i] = self.rng.gen_range(2..=3),
                    _ => target.insert(0, self.rng.gen_range(1..=2)),
                }
                let s = self.const_i64(&[target.len()], target);
                vec![(self.b.node("Expand", &[&a.name, &s], vec![]), a.nonneg)]
            }
            Op::GatherConst => {
                let a = self.pick_where(|t| !t.shape.is_empty())?;
                let axis = self.axis(a.shape.len(), |_| true)?;
                let d = a.shape[axis] as i64;
                let ishape = [vec![], vec![d as usize], vec![2, 2]]
                    .choose(&mut self.rng)
                    .unwrap()
                    .clone();
                let n = ishape.iter().product();
                let idx: Vec<i64> = (0..n).map(|_| self.rng.gen_range(-d..d)).collect();
                let i = self.const_i64(&ishape, idx);
                vec![(
                    self.b.node("Gather", &[&a.name, &i], vec![("axis", int(axis as i64))]),
                    a.nonneg,
                )]
            }
            Op::GatherData => {
                let a = self.pick_where(|t| t.shape.iter().any(|&d| d >= 2))?;
                let shape = a.shape.clone();
                let axis = self.axis(shape.len(), |i| shape[i] >= 2)?;
                let mut idx = self.data_bit();
                if self.rng.gen() {
                    let ax = self.const_i64(&[1], vec![0]);
                    idx = self.b.node("Unsqueeze", &[&idx, &ax], vec![]);
                }
                vec![(
                    self.b
                        .node("Gather", &[&a.name, &idx], vec![("axis", int(axis as i64))]),
                    a.nonneg,
                )]
            }
            Op::GatherElements => {
                let a = self.pick_where(|t| !t.shape.is_empty())?;
                let axis = self.axis(a.shape.len(), |_| true)?;
                let d = a.shape[axis] as i64;
                let mut ishape = a.shape.clone();
                ishape[axis] = self.rng.gen_range(1..=d as usize);
                let n = ishape.iter().product();
                let idx: Vec<i64> = (0..n).map(|_| self.rng.gen_range(0..d)).collect();
                let i = self.const_i64(&ishape, idx);
                vec![(
                    self.b
                        .node("GatherElements", &[&a.name, &i], vec![("axis", int(axis as i64))]),
                    a.nonneg,
                )]
            }
            Op::GatherElementsData => {
                // Indices computed elementwise from a same-shaped tensor.
                let a = self.pick_where(|t| t.shape.iter().any(|&d| d >= 2))?;
                let shape = a.shape.clone();
                let axis = self.axis(shape.len(), |i| shape[i] >= 2)?;
                let src = self.same_shape(&a);
                let t = self.rng.gen_range(-0.5f32..0.5);
                let c = self.const_f32(&[], vec![t]);
                let g = self.b.node("Greater", &[&src.name, &c], vec![]);
                let idx = self
                    .b
                    .node("Cast", &[&g], vec![("to", int(DType::Int64.onnx_code() as i64))]);
                vec![(
                    self.b
                        .node("GatherElements", &[&a.name, &idx], vec![("axis", int(axis as i64))]),
                    a.nonneg,
                )]
            }
            Op::ScatterConst | Op::ScatterData => {
                let a = self.pick_where(|t| !t.shape.is_empty() && t.shape[0] >= 2)?;
                let src = self.same_shape(&a);
                let d = a.shape[0] as i64;
                let row = self.rng.gen_range(0..d);
                let r = self.const_i64(&[1], vec![row]);
                let updates = self.b.node("Gather", &[&src.name, &r], vec![("axis", int(0))]);
                let indices = if matches!(op, Op::ScatterConst) {
                    let k = self.rng.gen_range(0..d);
                    self.const_i64(&[1, 1], vec![k])
                } else {
                    let bit = self.data_bit();
                    let s = self.const_i64(&[2], vec![1, 1]);
                    self.b.node("Reshape", &[&bit, &s], vec![])
                };
                vec![(self.b.node("ScatterND", &[&a.name, &indices, &updates], vec![]), false)]
            }
            Op::ConstantOfShape => {
                let a = self.pick();
                let s = self.b.node("Shape", &[&a.name], vec![]);
                let v = self.rng.gen_range(0.5f32..2.0);
                let c = self.b.node(
                    "ConstantOfShape",
                    &[&s],
                    vec![("value", Attribute::Tensor(TensorValue::vec_f32(&[v])))],
                );
                let other = self.same_shape(&a);
                let op = *["Add", "Mul"].choose(&mut self.rng).unwrap();
                vec![(self.b.node(op, &[&other.name, &c], vec![]), false)]
            }
            Op::Size => {
                let a = self.pick();
                let n = self.b.node("Size", &[&a.name], vec![]);
                let f = self
                    .b
                    .node("Cast", &[&n], vec![("to", int(DType::Float32.onnx_code() as i64))]);
                let other = self.pick();
                vec![(self.b.node("Div", &[&other.name, &f], vec![]), false)]
            }
            Op::Quantize => {
                let a = self.pick();
                let q = self.b.node_multi("DynamicQuantizeLinear", &[&a.name], 3, vec![]);
                let y = self.b.node("DequantizeLinear", &[&q[0], &q[1], &q[2]], vec![]);
                vec![(y, false)]
            }
            Op::IntRoundTrip => {
                let a = self.pick();
                let scale = self.const_f32(&[], vec![4.0]);
                let m = self.b.node("Mul", &[&a.name, &scale], vec![]);
                let to = if self.rng.gen() { DType::Int64 } else { DType::Int32 };
                let i = self.b.node("Cast", &[&m], vec![("to", int(to.onnx_code() as i64))]);
                let i2 = self.b.node("Add", &[&i, &i], vec![]);
                let f = self
                    .b
                    .node("Cast", &[&i2], vec![("to", int(DType::Float32.onnx_code() as i64))]);
                vec![(f, false)]
            }
        };
        Some(out)
    }

    /// Try one operator; keep it only if the graph still infers and stays
    /// within the depth bound.
    fn step(&mut self, op: Op) -> bool {
        let snapshot = self.b.model().clone();
        let Some(outs) = self.emit(op) else {
            *self.b.model_mut() = snapshot;
            return false;
        };
        let info = match infer_shapes(self.b.model()) {
            Ok(info) => info,
            Err(_) => {
                *self.b.model_mut() = snapshot;
                return false;
            }
        };
        let mut depth = self.depth.clone();
        for node in &self.b.model().nodes[snapshot.nodes.len()..] {
            let d = 1 + node
                .inputs
                .iter()
                .filter_map(|i| depth.get(i))
                .max()
                .copied()
                .unwrap_or(0);
            for o in &node.outputs {
                depth.insert(o.clone(), d);
            }
        }
        let too_deep = outs.iter().any(|(o, _)| depth[o] > self.params.max_depth);
        let grows = self.params.pool == OpPool::Elementwise
            && outs
                .iter()
                .any(|(o, _)| info.shape(o).is_none_or(|s| !self.pool.iter().any(|a| a.shape == s)));
        let empty = outs.iter().any(|(o, _)| info.shape(o).is_none_or(|s| s.contains(&0)));
        let huge = outs
            .iter()
            .any(|(o, _)| info.shape(o).is_none_or(|s| s.iter().product::<usize>() > 4096));
        let float = outs
            .iter()
            .all(|(o, _)| info.get(o).map(|t| t.dtype) == Some(DType::Float32));
        if too_deep || grows || empty || huge || !float {
            *self.b.model_mut() = snapshot;
            return false;
        }
        self.depth = depth;
        for (o, nonneg) in outs {
            self.pool.push(Avail {
                shape: info.shape(&o).unwrap().to_vec(),
                name: o,
                nonneg,
            });
        }
        true
    }
}

fn try_generate(rng: ChaCha8Rng, seed: u64, params: &GraphParams) -> Option<RandomGraph> {
    let bsz = params.batch_size;
    let mut g = Gen {
        b: GraphBuilder::new(&format!("fuzz_{seed:016x}")),
        rng,
        params,
        pool: Vec::new(),
        depth: HashMap::new(),
    };
    let shapes: [Vec<usize>; 3] = [vec![bsz, 4], vec![bsz, 3, 4], vec![bsz, 2, 4, 4]];
    for (k, s) in shapes.iter().enumerate() {
        let name = g.b.input_fixed(&format!("x{k}"), DType::Float32, s);
        g.pool.push(Avail {
            name,
            shape: s.clone(),
            nonneg: false,
        });
    }
    let ops = match params.pool {
        OpPool::Full => FULL,
        OpPool::Elementwise => ELEMENTWISE,
    };
    let target = g.rng.gen_range(2..=12);
    let mut made = 0;
    for _ in 0..target * 8 {
        if made == target {
            break;
        }
        let op = ops.choose_weighted(&mut g.rng, |o| o.1).expect("positive weights").0;
        made += g.step(op) as usize;
    }
    if made == 0 {
        return None;
    }

    // Outputs: every unconsumed produced tensor, plus sometimes one more.
    let consumed: HashSet<&str> =
        g.b.model()
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(|s| s.as_str()))
            .collect();
    let n_inputs = 3;
    let produced = &g.pool[n_inputs..];
    let mut outs: Vec<Avail> = produced
        .iter()
        .filter(|a| !consumed.contains(a.name.as_str()))
        .cloned()
        .collect();
    if outs.is_empty() || g.rng.gen_bool(0.3) {
        let extra = produced.choose(&mut g.rng).unwrap().clone();
        if !outs.iter().any(|a| a.name == extra.name) {
            outs.push(extra);
        }
    }
    let mut config = BatchingConfig::new(bsz);
    for i in &g.b.model().inputs {
        config = config.batched_input(&i.name, 0);
    }
    for o in &outs {
        let dims = o.shape.iter().map(|&d| Dim::Fixed(d)).collect();
        g.b.output(&o.name, DType::Float32, dims);
        let spec = if o.shape.first() == Some(&bsz) {
            OutputSpec::Batched { batch_axis: 0 }
        } else {
            OutputSpec::Shared
        };
        config = config.output(&o.name, spec);
    }
    let model = g.b.finish().ok()?;
    if !validate_support(&model).is_empty() || infer_shapes(&model).is_err() {
        return None;
    }
    Some(RandomGraph { seed, model, config })
}

/// A random well-shaped graph over three batched float inputs
/// (`[B,4]`, `[B,3,4]`, `[B,2,4,4]`). Deterministic in `seed`.
pub fn random_graph(seed: u64, params: &GraphParams) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let attempt = ChaCha8Rng::seed_from_u64(rng.gen());
        if let Some(g) = try_generate(attempt, seed, params) {
            return g;
        }
    }
}
