//! Concrete reference interpreter, the differential probe, and the random
//! graph fuzzer built on top of it.

pub mod fuzz;
mod kernels;
pub(crate) mod movement;
pub mod probe;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{topological_order, Dim, GraphModel};
use crate::tensor::json::TensorMap;
use crate::tensor::TensorValue;

pub use fuzz::{
    fuzz_soundness, random_graph, Counterexample, FuzzOptions, FuzzSummary, GraphParams, OpPool, RandomGraph,
};
pub use kernels::eval_node;
pub use probe::{probe, ProbeOptions, ProbeReport, Witness};

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the random stream of node `index` in an execution seeded `seed`.
pub(crate) fn node_seed(seed: u64, index: usize, attr_seed: Option<f32>) -> u64 {
    let s = mix(seed ^ mix(index as u64));
    match attr_seed {
        Some(a) => mix(s ^ a.to_bits() as u64),
        None => s,
    }
}

/// A model prepared for repeated execution.
#[derive(Debug, Clone)]
pub struct Interpreter<'m> {
    model: &'m GraphModel,
    order: Vec<usize>,
}

impl<'m> Interpreter<'m> {
    pub fn new(model: &'m GraphModel) -> Result<Self> {
        model.validate_structure()?;
        let diags = crate::graph::validate_support(model);
        if let Some(d) = diags.first() {
            return Err(Error::UnsupportedOp(d.to_string()));
        }
        Ok(Interpreter {
            model,
            order: topological_order(model)?,
        })
    }

    pub fn model(&self) -> &GraphModel {
        self.model
    }

    /// Check that `inputs` supplies every graph input with a matching type
    /// and a shape consistent with the declared (possibly symbolic) dims.
    pub fn check_inputs(&self, inputs: &TensorMap) -> Result<()> {
        let mut symbols: HashMap<&str, usize> = HashMap::new();
        for spec in &self.model.inputs {
            let t = inputs
                .get(&spec.name)
                .ok_or_else(|| Error::MissingInput(spec.name.clone()))?;
            let bad = |msg: String| Error::InvalidInput {
                name: spec.name.clone(),
                msg,
            };
            if t.dtype() != spec.dtype {
                return Err(bad(format!("expected {}, got {}", spec.dtype, t.dtype())));
            }
            if let Some(dims) = &spec.shape {
                let shape = t.shape();
                if dims.len() != shape.len() {
                    return Err(bad(format!("expected rank {}, got shape {shape:?}", dims.len())));
                }
                for (d, &n) in dims.iter().zip(shape) {
                    match d {
                        Dim::Fixed(f) if *f != n => {
                            return Err(bad(format!("expected dimension {f}, got shape {shape:?}")))
                        }
                        Dim::Symbolic(s) => {
                            let prev = *symbols.entry(s).or_insert(n);
                            if prev != n {
                                return Err(bad(format!("dimension `{s}` is {prev} elsewhere, got {n}")));
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        if let Some(extra) = inputs.keys().find(|k| self.model.input(k).is_none()) {
            return Err(Error::InvalidInput {
                name: extra.clone(),
                msg: "not a graph input".into(),
            });
        }
        Ok(())
    }

    fn run(&self, inputs: &TensorMap, seed: u64, mut visit: impl FnMut(&str, &TensorValue)) -> Result<TensorMap> {
        self.check_inputs(inputs)?;
        let model = self.model;
        let mut produced: HashMap<&str, TensorValue> = HashMap::new();
        for &i in &self.order {
            let node = &model.nodes[i];
            let ins: Vec<Option<&TensorValue>> = node
                .inputs
                .iter()
                .map(|n| {
                    if n.is_empty() {
                        None
                    } else {
                        inputs
                            .get(n)
                            .or_else(|| model.initializers.get(n))
                            .or_else(|| produced.get(n.as_str()))
                    }
                })
                .collect();
            let attr_seed = match node.attr("seed") {
                Some(crate::graph::Attribute::Float(s)) => Some(*s),
                _ => None,
            };
            let outs = eval_node(node, &ins, node_seed(seed, i, attr_seed))
                .map_err(|e| e.at_node(&node.label(), &node.op_type))?;
            if outs.len() < node.outputs.iter().filter(|o| !o.is_empty()).count() {
                return Err(Error::InvalidModel(format!(
                    "node `{}` declares more outputs than {} produces",
                    node.label(),
                    node.op_type
                )));
            }
            for (name, v) in node.outputs.iter().zip(outs) {
                if !name.is_empty() {
                    visit(name, &v);
                    produced.insert(name, v);
                }
            }
        }
        let mut out = BTreeMap::new();
        for o in &model.outputs {
            let v = inputs
                .get(&o.name)
                .or_else(|| model.initializers.get(&o.name))
                .or_else(|| produced.get(o.name.as_str()))
                .ok_or_else(|| Error::TensorNotFound(o.name.clone()))?;
            out.insert(o.name.clone(), v.clone());
        }
        Ok(out)
    }

    /// Graph outputs for one execution.
    pub fn execute(&self, inputs: &TensorMap, seed: u64) -> Result<TensorMap> {
        self.run(inputs, seed, |_, _| {})
    }

    /// Every tensor of one execution: inputs, initializers, and node outputs.
    pub fn execute_traced(&self, inputs: &TensorMap, seed: u64) -> Result<TensorMap> {
        let mut all: TensorMap = inputs.clone();
        all.extend(self.model.initializers.iter().map(|(k, v)| (k.clone(), v.clone())));
        self.run(inputs, seed, |n, v| {
            all.insert(n.to_string(), v.clone());
        })?;
        Ok(all)
    }

    /// Run and report whether any float tensor along the way was non-finite.
    pub(crate) fn execute_checked(&self, inputs: &TensorMap, seed: u64) -> Result<(TensorMap, bool)> {
        let mut finite = inputs.values().all(|v| v.all_finite());
        let out = self.run(inputs, seed, |_, v| finite &= v.all_finite())?;
        Ok((out, finite))
    }
}

/// Execute `model` on `inputs`, returning its graph outputs.
pub fn execute(model: &GraphModel, inputs: &TensorMap, seed: u64) -> Result<TensorMap> {
    Interpreter::new(model)?.execute(inputs, seed)
}

/// Execute `model` on `inputs`, returning every named tensor.
pub fn execute_traced(model: &GraphModel, inputs: &TensorMap, seed: u64) -> Result<TensorMap> {
    Interpreter::new(model)?.execute_traced(inputs, seed)
}
