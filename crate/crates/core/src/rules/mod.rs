//! Label-propagation rules, one per operator kind.
//!
//! Every rule maps input shadow tensors to output shadow tensors so that
//! each output label covers every user whose data can influence that
//! element. Rules may over-approximate; they must never drop a user.

mod contraction;
mod elementwise;
mod movement;
mod other;

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{op_support, NodeSpec};
use crate::label::{self, Label, ShadowTensor};
use crate::tensor::TensorValue;

/// Operator families sharing one propagation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    UnaryElementwise,
    BinaryElementwise,
    Contraction,
    Reduction,
    DataMovement,
    GatherLike,
    ScatterLike,
    ShapeLike,
    Select,
    RandomSource,
    QuantizeLike,
}

/// Everything a rule may look at for one node.
pub struct PropagationContext<'a> {
    pub node: &'a NodeSpec,
    /// Input shadows; `None` for omitted optional inputs.
    pub inputs: Vec<Option<&'a ShadowTensor>>,
    /// Input values fixed at analysis time.
    pub known: Vec<Option<&'a TensorValue>>,
    /// Output shapes from shape inference.
    pub output_shapes: Vec<Vec<usize>>,
    /// Treat a product with a known zero operand as carrying no user.
    pub zero_mul_refinement: bool,
}

impl PropagationContext<'_> {
    pub fn input(&self, i: usize) -> Result<&ShadowTensor> {
        self.inputs
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::MissingInput(format!("{} input #{i}", self.node.label())))
    }

    pub(crate) fn shape_err(&self) -> impl Fn(String) -> Error + '_ {
        move |m| Error::shape(&self.node.label(), m)
    }

    /// Combine of every label on every input.
    pub fn fold_inputs(&self) -> Label {
        self.inputs
            .iter()
            .flatten()
            .fold(Label::NEUTRAL, |acc, s| acc.combine(label::fold(s.iter())))
    }

    /// One shadow per output, each filled with `l`.
    pub fn fill_outputs(&self, l: Label) -> Vec<ShadowTensor> {
        self.output_shapes
            .iter()
            .map(|s| ndarray::ArrayD::from_elem(ndarray::IxDyn(s), l))
            .collect()
    }
}

pub type RuleFn = fn(&PropagationContext) -> Result<Vec<ShadowTensor>>;

/// The built-in rules plus optional per-operator replacements.
#[derive(Clone, Default)]
pub struct RuleSet {
    overrides: HashMap<String, RuleFn>,
}

impl fmt::Debug for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut keys: Vec<_> = self.overrides.keys().collect();
        keys.sort();
        f.debug_struct("RuleSet").field("overrides", &keys).finish()
    }
}

impl RuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replace the rule for `op_type`.
    pub fn with_override(mut self, op_type: &str, rule: RuleFn) -> Self {
        self.overrides.insert(op_type.to_string(), rule);
        self
    }

    pub fn propagate(&self, ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
        let out = match self.overrides.get(&ctx.node.op_type) {
            Some(rule) => rule(ctx)?,
            None => propagate_node(ctx)?,
        };
        if out.len() != ctx.output_shapes.len() {
            return Err(Error::InvalidModel(format!(
                "rule for `{}` produced {} outputs, expected {}",
                ctx.node.label(),
                out.len(),
                ctx.output_shapes.len()
            )));
        }
        for (s, want) in out.iter().zip(&ctx.output_shapes) {
            if s.shape() != want.as_slice() {
                return Err(Error::shape(
                    &ctx.node.label(),
                    format!("rule produced shadow {:?}, expected {want:?}", s.shape()),
                ));
            }
        }
        Ok(out)
    }
}

/// Apply the built-in rule for the node's operator.
pub fn propagate_node(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    let kind = op_support(&ctx.node.op_type)
        .ok_or_else(|| Error::UnsupportedOp(ctx.node.op_type.clone()))?
        .rule;
    match kind {
        RuleKind::UnaryElementwise => elementwise::unary(ctx),
        RuleKind::BinaryElementwise => elementwise::binary(ctx),
        RuleKind::Select => elementwise::select(ctx),
        RuleKind::Contraction => contraction::contraction(ctx),
        RuleKind::Reduction => other::reduction(ctx),
        RuleKind::DataMovement => movement::data_movement(ctx),
        RuleKind::GatherLike => movement::gather_like(ctx),
        RuleKind::ScatterLike => movement::scatter_like(ctx),
        RuleKind::ShapeLike => other::shape_like(ctx),
        RuleKind::RandomSource => Ok(ctx.fill_outputs(Label::RANDOM)),
        RuleKind::QuantizeLike => other::quantize_like(ctx),
    }
}

/// The conservative rule: every output element carries every input label.
pub fn conservative(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    Ok(ctx.fill_outputs(ctx.fold_inputs()))
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    pub fn u(k: u32) -> Label {
        Label::from_user(k).unwrap()
    }

    /// Shadow of shape `shape` whose slice `b` along axis 0 carries user b+1.
    pub fn batched(shape: &[usize]) -> ShadowTensor {
        let mut s = ArrayD::from_elem(IxDyn(shape), Label::NEUTRAL);
        for (idx, l) in s.indexed_iter_mut() {
            *l = u(idx[0] as u32 + 1);
        }
        s
    }

    pub fn run(
        node: &NodeSpec,
        inputs: &[Option<&ShadowTensor>],
        known: &[Option<&TensorValue>],
        out_shapes: &[&[usize]],
    ) -> Result<Vec<ShadowTensor>> {
        let ctx = PropagationContext {
            node,
            inputs: inputs.to_vec(),
            known: (0..inputs.len()).map(|i| known.get(i).copied().flatten()).collect(),
            output_shapes: out_shapes.iter().map(|s| s.to_vec()).collect(),
            zero_mul_refinement: true,
        };
        RuleSet::new().propagate(&ctx)
    }
}
