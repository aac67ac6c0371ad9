//! The batch-isolation checker: label the batched inputs by user, push the
//! labels through the graph, and confirm every output row depends on its
//! own user only.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use ndarray::Dimension;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{infer_shapes, validate_support, Dim, GraphModel, ShapeInfo};
use crate::label::{neutral, Label, LabelState, ShadowTensor, MAX_USER};
use crate::rules::{PropagationContext, RuleSet};

/// Violations listed per output before the report is truncated.
pub const MAX_REPORTED_VIOLATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    /// Slice `b` along `batch_axis` belongs to user `b + 1`.
    Batched { batch_axis: usize },
    /// Data common to every user; not secret by declaration.
    Shared,
    /// Data fixed independently of any user (position ids and the like).
    ConstantLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSpec {
    /// Slice `b` along `batch_axis` is returned to user `b + 1`.
    Batched { batch_axis: usize },
    /// Must not depend on any user.
    Shared,
}

/// How the batch is laid out across a model's inputs and outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchingConfig {
    pub batch_size: usize,
    pub dim_bindings: BTreeMap<String, usize>,
    pub inputs: BTreeMap<String, InputSpec>,
    pub outputs: BTreeMap<String, OutputSpec>,
    pub allow_random_outputs: bool,
    pub fail_fast: bool,
}

impl BatchingConfig {
    pub fn new(batch_size: usize) -> Self {
        BatchingConfig {
            batch_size,
            dim_bindings: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            allow_random_outputs: true,
            fail_fast: false,
        }
    }

    pub fn input(mut self, name: &str, spec: InputSpec) -> Self {
        self.inputs.insert(name.to_string(), spec);
        self
    }

    pub fn output(mut self, name: &str, spec: OutputSpec) -> Self {
        self.outputs.insert(name.to_string(), spec);
        self
    }

    pub fn batched_input(self, name: &str, batch_axis: usize) -> Self {
        self.input(name, InputSpec::Batched { batch_axis })
    }

    pub fn batched_output(self, name: &str, batch_axis: usize) -> Self {
        self.output(name, OutputSpec::Batched { batch_axis })
    }

    pub fn bind(mut self, symbol: &str, extent: usize) -> Self {
        self.dim_bindings.insert(symbol.to_string(), extent);
        self
    }

    /// The same layout with a different batch size. Bindings of symbols that
    /// sit on a batch axis follow the new size.
    pub fn with_batch_size(&self, model: &GraphModel, batch_size: usize) -> Self {
        let mut c = self.clone();
        for sym in batch_symbols(model, self) {
            c.dim_bindings.insert(sym, batch_size);
        }
        c.batch_size = batch_size;
        c
    }

    /// Substitute the configured bindings into `model`, binding any
    /// still-free symbol on a batched input's batch axis to `batch_size`.
    pub fn bind_model(&self, model: &GraphModel) -> Result<GraphModel> {
        if self.batch_size == 0 || self.batch_size > MAX_USER as usize {
            return Err(Error::Config(format!(
                "batch_size must be in 1..={MAX_USER}, got {}",
                self.batch_size
            )));
        }
        self.check_names(model)?;
        let mut bindings = self.dim_bindings.clone();
        for sym in batch_symbols(model, self) {
            bindings.entry(sym).or_insert(self.batch_size);
        }
        model.bind_dimensions(&bindings)
    }

    /// Check the config against a model whose input shapes are bound.
    pub fn validate(&self, model: &GraphModel) -> Result<()> {
        self.check_names(model)?;
        for spec in &model.inputs {
            if let Some(InputSpec::Batched { batch_axis }) = self.inputs.get(&spec.name) {
                self.check_axis(&spec.name, &spec.concrete_shape()?, *batch_axis)?;
            }
        }
        Ok(())
    }

    /// Every graph input and output has a spec, and every spec names one.
    fn check_names(&self, model: &GraphModel) -> Result<()> {
        for name in self.inputs.keys() {
            if model.input(name).is_none() {
                return Err(Error::Config(format!("`{name}` is not a graph input")));
            }
        }
        for name in self.outputs.keys() {
            if model.output(name).is_none() {
                return Err(Error::Config(format!("`{name}` is not a graph output")));
            }
        }
        for spec in &model.inputs {
            if !self.inputs.contains_key(&spec.name) {
                return Err(Error::Config(format!(
                    "graph input `{}` has no batching spec",
                    spec.name
                )));
            }
        }
        for spec in &model.outputs {
            if !self.outputs.contains_key(&spec.name) {
                return Err(Error::Config(format!(
                    "graph output `{}` has no batching spec",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    fn check_axis(&self, name: &str, shape: &[usize], axis: usize) -> Result<()> {
        match shape.get(axis) {
            None => Err(Error::Config(format!(
                "`{name}` has rank {} but batch_axis is {axis}",
                shape.len()
            ))),
            Some(&n) if n != self.batch_size => Err(Error::Config(format!(
                "`{name}` has extent {n} on batch axis {axis}, expected batch size {}",
                self.batch_size
            ))),
            Some(_) => Ok(()),
        }
    }
}

fn batch_symbols(model: &GraphModel, config: &BatchingConfig) -> Vec<String> {
    let mut out = Vec::new();
    for spec in &model.inputs {
        if let (Some(InputSpec::Batched { batch_axis }), Some(dims)) = (config.inputs.get(&spec.name), &spec.shape) {
            if let Some(Dim::Symbolic(s)) = dims.get(*batch_axis) {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
    }
    out
}

pub type ShadowMap = HashMap<String, ShadowTensor>;

/// Label every graph input and initializer.
pub fn initialize_shadows(model: &GraphModel, config: &BatchingConfig) -> Result<ShadowMap> {
    config.validate(model)?;
    let mut map = ShadowMap::new();
    for spec in &model.inputs {
        let shape = spec.concrete_shape()?;
        let shadow = match config.inputs[&spec.name] {
            InputSpec::Batched { batch_axis } => {
                let users: Vec<Label> = (1..=config.batch_size as u32)
                    .map(Label::from_user)
                    .collect::<Result<_>>()?;
                let mut s = neutral(&shape);
                for (idx, l) in s.indexed_iter_mut() {
                    *l = users[idx[batch_axis]];
                }
                s
            }
            InputSpec::Shared => {
                tracing::warn!(input = %spec.name, "shared input treated as carrying no user data");
                neutral(&shape)
            }
            InputSpec::ConstantLike => neutral(&shape),
        };
        map.insert(spec.name.clone(), shadow);
    }
    for (name, v) in &model.initializers {
        map.insert(name.clone(), neutral(v.shape()));
    }
    Ok(map)
}

/// Outcome of pushing labels through the graph.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub shadows: ShadowMap,
    /// First node, in topological order, with a multi-user output element.
    pub first_tainted_node: Option<String>,
    /// Node at which fail-fast propagation stopped.
    pub halted_at: Option<String>,
    pub nodes_visited: usize,
}

/// Options controlling propagation.
#[derive(Debug, Clone)]
pub struct Checker {
    pub rules: RuleSet,
    pub zero_mul_refinement: bool,
}

impl Default for Checker {
    fn default() -> Self {
        Checker {
            rules: RuleSet::new(),
            zero_mul_refinement: true,
        }
    }
}

impl Checker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rules(mut self, rules: RuleSet) -> Self {
        self.rules = rules;
        self
    }

    pub fn zero_mul_refinement(mut self, on: bool) -> Self {
        self.zero_mul_refinement = on;
        self
    }

    /// Propagate labels in topological order. With `config.fail_fast`,
    /// stop after the first node that writes a violating graph-output element.
    pub fn propagate_graph(
        &self,
        model: &GraphModel,
        info: &ShapeInfo,
        mut shadows: ShadowMap,
        config: &BatchingConfig,
    ) -> Result<Propagation> {
        let mut first_tainted_node = None;
        let mut halted_at = None;
        let mut visited = 0;
        for &i in &info.order {
            let node = &model.nodes[i];
            let outs = {
                let ctx = PropagationContext {
                    node,
                    inputs: node
                        .inputs
                        .iter()
                        .map(|n| if n.is_empty() { None } else { shadows.get(n) })
                        .collect(),
                    known: node.inputs.iter().map(|n| info.known.get(n)).collect(),
                    output_shapes: info.node_outputs[i].iter().map(|t| t.shape.clone()).collect(),
                    zero_mul_refinement: self.zero_mul_refinement,
                };
                self.rules
                    .propagate(&ctx)
                    .map_err(|e| e.at_node(&node.label(), &node.op_type))?
            };
            visited += 1;
            if first_tainted_node.is_none() && outs.iter().any(|s| s.iter().any(|l| l.is_multi_user())) {
                tracing::debug!(node = %node.label(), "first multi-user label");
                first_tainted_node = Some(node.label());
            }
            let mut violating_output = false;
            for (name, s) in node.outputs.iter().zip(outs) {
                if name.is_empty() {
                    continue;
                }
                if config.fail_fast {
                    if let Some(spec) = config.outputs.get(name) {
                        violating_output |= check_output(name, &s, *spec, config).violating > 0;
                    }
                }
                shadows.insert(name.clone(), s);
            }
            if violating_output {
                halted_at = Some(node.label());
                break;
            }
        }
        Ok(Propagation {
            shadows,
            first_tainted_node,
            halted_at,
            nodes_visited: visited,
        })
    }

    /// Run the full check on `model` (symbolic dimensions are bound from
    /// `config` first).
    pub fn check(&self, model: &GraphModel, config: &BatchingConfig) -> Result<Verdict> {
        let start = Instant::now();
        let diags = validate_support(model);
        if !diags.is_empty() {
            let msgs: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            return Err(Error::UnsupportedOp(msgs.join("; ")));
        }
        let bound = config.bind_model(model)?;
        let info = infer_shapes(&bound)?;
        let shadows = initialize_shadows(&bound, config)?;
        let prop = self.propagate_graph(&bound, &info, shadows, config)?;
        let mut verdict = verify_outputs(&bound, &prop.shadows, config)?;
        verdict.first_tainted_node = if verdict.is_safe() {
            None
        } else {
            prop.first_tainted_node
        };
        verdict.halted_at = prop.halted_at;
        verdict.stats = Stats {
            nodes: prop.nodes_visited,
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok(verdict)
    }
}

/// Check with the built-in rules.
pub fn check(model: &GraphModel, config: &BatchingConfig) -> Result<Verdict> {
    Checker::new().check(model, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Safe,
    Leak,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub output: String,
    pub index: Vec<usize>,
    pub label: Label,
    /// The only user allowed at this element, rendered like a label.
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutputSummary {
    pub name: String,
    pub elements: usize,
    pub violating: usize,
    pub multi_user: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Stats {
    pub nodes: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub verdict: Outcome,
    pub model: String,
    pub batch_size: usize,
    pub violations: Vec<Violation>,
    pub truncated: bool,
    pub first_tainted_node: Option<String>,
    pub halted_at: Option<String>,
    pub outputs: Vec<OutputSummary>,
    pub stats: Stats,
}

impl Verdict {
    pub fn is_safe(&self) -> bool {
        self.verdict == Outcome::Safe
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("verdict serializes")
    }

    /// Equality ignoring timing.
    pub fn same_result(&self, other: &Verdict) -> bool {
        let strip = |v: &Verdict| Verdict {
            stats: Stats {
                nodes: v.stats.nodes,
                seconds: 0.0,
            },
            ..v.clone()
        };
        strip(self) == strip(other)
    }
}

struct OutputCheck {
    violating: usize,
    multi_user: usize,
    examples: Vec<Violation>,
}

fn check_output(name: &str, s: &ShadowTensor, spec: OutputSpec, config: &BatchingConfig) -> OutputCheck {
    let mut out = OutputCheck {
        violating: 0,
        multi_user: 0,
        examples: Vec::new(),
    };
    for (idx, &l) in s.indexed_iter() {
        let expected = match spec {
            OutputSpec::Batched { batch_axis } => Some(idx[batch_axis] as u32 + 1),
            OutputSpec::Shared => None,
        };
        let state = l.classify();
        let ok = match state {
            LabelState::Neutral => true,
            LabelState::RandomOnly => config.allow_random_outputs,
            LabelState::SingleUser(u) => Some(u) == expected && (config.allow_random_outputs || !l.is_random()),
            LabelState::MultiUser { .. } => false,
        };
        if matches!(state, LabelState::MultiUser { .. }) {
            out.multi_user += 1;
        }
        if !ok {
            out.violating += 1;
            if out.examples.len() < MAX_REPORTED_VIOLATIONS + 1 {
                out.examples.push(Violation {
                    output: name.to_string(),
                    index: idx.slice().to_vec(),
                    label: l,
                    expected: expected.map_or("e".to_string(), |u| format!("u{u}")),
                });
            }
        }
    }
    out
}

/// Compare output labels with the expected per-row users.
pub fn verify_outputs(model: &GraphModel, shadows: &ShadowMap, config: &BatchingConfig) -> Result<Verdict> {
    let mut violations = Vec::new();
    let mut truncated = false;
    let mut outputs = Vec::new();
    for spec in &model.outputs {
        let Some(s) = shadows.get(&spec.name) else {
            if config.fail_fast {
                continue;
            }
            return Err(Error::TensorNotFound(spec.name.clone()));
        };
        let ospec = *config
            .outputs
            .get(&spec.name)
            .ok_or_else(|| Error::Config(format!("graph output `{}` has no batching spec", spec.name)))?;
        if let OutputSpec::Batched { batch_axis } = ospec {
            config.check_axis(&spec.name, s.shape(), batch_axis)?;
        }
        let mut c = check_output(&spec.name, s, ospec, config);
        if c.examples.len() > MAX_REPORTED_VIOLATIONS {
            truncated = true;
            c.examples.truncate(MAX_REPORTED_VIOLATIONS);
        }
        violations.extend(c.examples);
        outputs.push(OutputSummary {
            name: spec.name.clone(),
            elements: s.len(),
            violating: c.violating,
            multi_user: c.multi_user,
        });
    }
    let verdict = if outputs.iter().any(|o| o.violating > 0) {
        Outcome::Leak
    } else {
        Outcome::Safe
    };
    Ok(Verdict {
        verdict,
        model: model.name.clone(),
        batch_size: config.batch_size,
        violations,
        truncated,
        first_tainted_node: None,
        halted_at: None,
        outputs,
        stats: Stats::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attribute, NodeSpec, TensorSpec};
    use crate::tensor::{DType, TensorValue};

    fn mlp() -> GraphModel {
        GraphModel {
            name: "mlp".into(),
            opset_version: 17,
            inputs: vec![TensorSpec::symbolic(
                "x",
                DType::Float32,
                vec![Dim::Symbolic("batch".into()), Dim::Fixed(4)],
            )],
            outputs: vec![TensorSpec::symbolic(
                "y",
                DType::Float32,
                vec![Dim::Symbolic("batch".into()), Dim::Fixed(3)],
            )],
            initializers: [
                ("w".to_string(), TensorValue::from_f32(&[4, 3], vec![0.1; 12]).unwrap()),
                ("b".to_string(), TensorValue::vec_f32(&[0.0, 1.0, 2.0])),
            ]
            .into(),
            nodes: vec![
                NodeSpec::new("mm", "MatMul", &["x", "w"], &["h"]),
                NodeSpec::new("add", "Add", &["h", "b"], &["z"]),
                NodeSpec::new("relu", "Relu", &["z"], &["y"]),
            ],
            ..Default::default()
        }
    }

    fn config(b: usize) -> BatchingConfig {
        BatchingConfig::new(b).batched_input("x", 0).batched_output("y", 0)
    }

    #[test]
    fn batch_axis_rows_get_their_users() {
        let m = config(2).bind_model(&mlp()).unwrap();
        let s = initialize_shadows(&m, &config(2)).unwrap();
        let x = &s["x"];
        assert!(x.index_axis(ndarray::Axis(0), 0).iter().all(|l| l.to_string() == "u1"));
        assert!(x.index_axis(ndarray::Axis(0), 1).iter().all(|l| l.to_string() == "u2"));
        assert!(s["w"].iter().all(|l| l.is_neutral()));
    }

    #[test]
    fn mlp_is_safe() {
        let v = check(&mlp(), &config(2)).unwrap();
        assert!(v.is_safe(), "{v:?}");
        assert_eq!(v.first_tainted_node, None);
        assert_eq!(v.outputs[0].elements, 6);
    }

    #[test]
    fn batch_reduction_leaks() {
        let mut m = mlp();
        m.nodes[1] = NodeSpec::new("add", "Add", &["h", "hs"], &["z"]);
        m.nodes.insert(
            1,
            NodeSpec::new("sum", "ReduceSum", &["h"], &["hs"]).with_attr("axes", Attribute::Ints(vec![0])),
        );
        let v = check(&m, &config(3)).unwrap();
        assert_eq!(v.verdict, Outcome::Leak);
        assert_eq!(v.first_tainted_node.as_deref(), Some("sum"));
        assert_eq!(v.outputs[0].violating, 9);
        assert_eq!(v.violations[0].expected, "u1");
        assert_eq!(v.violations[0].label.to_string(), "u1..3");
    }

    #[test]
    fn batch_permutation_leaks() {
        // Reversing rows hands user 1 the output computed from user 2.
        let mut m = mlp();
        m.initializers.insert("rev".into(), TensorValue::vec_i64(&[1, 0]));
        m.nodes[2] = NodeSpec::new("relu", "Relu", &["z"], &["r"]);
        m.nodes.push(NodeSpec::new("perm", "Gather", &["r", "rev"], &["y"]));
        let v = check(&m, &config(2)).unwrap();
        assert_eq!(v.verdict, Outcome::Leak);
        assert_eq!(v.first_tainted_node, None);
        assert_eq!(v.violations[0].label.to_string(), "u2");
    }

    #[test]
    fn single_user_batch_is_safe() {
        let mut m = mlp();
        m.nodes.insert(
            1,
            NodeSpec::new("sum", "ReduceSum", &["h"], &["hs"]).with_attr("axes", Attribute::Ints(vec![0])),
        );
        m.nodes[2] = NodeSpec::new("add", "Add", &["h", "hs"], &["z"]);
        assert!(check(&m, &config(1)).unwrap().is_safe());
    }

    #[test]
    fn config_errors() {
        let m = mlp();
        let c = BatchingConfig::new(2).batched_output("y", 0);
        assert!(matches!(check(&m, &c), Err(Error::Config(_))));
        let c = config(2).bind("batch", 3);
        assert!(matches!(check(&m, &c), Err(Error::Config(_))));
        let c = config(2).batched_input("ghost", 0);
        assert!(matches!(check(&m, &c), Err(Error::Config(_))));
    }

    #[test]
    fn random_outputs_follow_the_flag() {
        let mut m = mlp();
        m.nodes
            .push(NodeSpec::new("noise", "RandomNormal", &[], &["n"]).with_attr("shape", Attribute::Ints(vec![1, 3])));
        m.nodes[2] = NodeSpec::new("relu", "Relu", &["z"], &["r"]);
        m.nodes.push(NodeSpec::new("add2", "Add", &["r", "n"], &["y"]));
        assert!(check(&m, &config(2)).unwrap().is_safe());
        let mut c = config(2);
        c.allow_random_outputs = false;
        assert!(!check(&m, &c).unwrap().is_safe());
    }

    #[test]
    fn violation_list_is_capped() {
        let mut m = mlp();
        m.nodes.insert(
            1,
            NodeSpec::new("sum", "ReduceSum", &["h"], &["hs"]).with_attr("axes", Attribute::Ints(vec![0])),
        );
        m.nodes[2] = NodeSpec::new("add", "Add", &["h", "hs"], &["z"]);
        let v = check(&m, &config(5)).unwrap();
        assert_eq!(v.violations.len(), MAX_REPORTED_VIOLATIONS);
        assert!(v.truncated);
        assert_eq!(v.outputs[0].violating, 15);
    }
}
