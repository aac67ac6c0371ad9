//! Programmatic graph construction with collision-free naming.

use std::collections::HashSet;

use super::{Attribute, Dim, GraphModel, NodeSpec, TensorSpec};
use crate::error::Result;
use crate::tensor::{DType, TensorValue};

pub struct GraphBuilder {
    model: GraphModel,
    taken: HashSet<String>,
}

impl GraphBuilder {
    pub fn new(name: &str) -> Self {
        GraphBuilder {
            model: GraphModel {
                name: name.to_string(),
                opset_version: 17,
                ..Default::default()
            },
            taken: HashSet::new(),
        }
    }

    /// Continue building on an existing model; new names avoid its names.
    pub fn extend(model: GraphModel) -> Self {
        let mut taken = model.tensor_names();
        taken.extend(model.nodes.iter().map(|n| n.name.clone()));
        taken.extend(model.outputs.iter().map(|o| o.name.clone()));
        GraphBuilder { model, taken }
    }

    /// A name starting with `hint` not used anywhere in the graph yet.
    pub fn fresh(&mut self, hint: &str) -> String {
        let mut name = hint.to_string();
        let mut k = 1;
        while self.taken.contains(&name) {
            name = format!("{hint}_{k}");
            k += 1;
        }
        self.taken.insert(name.clone());
        name
    }

    pub fn input(&mut self, name: &str, dtype: DType, dims: Vec<Dim>) -> String {
        let name = self.fresh(name);
        self.model.inputs.push(TensorSpec::symbolic(name.clone(), dtype, dims));
        name
    }

    pub fn input_fixed(&mut self, name: &str, dtype: DType, shape: &[usize]) -> String {
        let name = self.fresh(name);
        self.model.inputs.push(TensorSpec::fixed(name.clone(), dtype, shape));
        name
    }

    pub fn constant(&mut self, hint: &str, value: TensorValue) -> String {
        let name = self.fresh(hint);
        self.model.initializers.insert(name.clone(), value);
        name
    }

    pub fn node_multi(
        &mut self,
        op: &str,
        inputs: &[&str],
        n_outputs: usize,
        attrs: Vec<(&str, Attribute)>,
    ) -> Vec<String> {
        let node_name = self.fresh(&op.to_lowercase());
        let outputs: Vec<String> = (0..n_outputs)
            .map(|k| self.fresh(&format!("{node_name}_out{k}")))
            .collect();
        let refs: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
        let mut node = NodeSpec::new(node_name, op, inputs, &refs);
        for (k, v) in attrs {
            node = node.with_attr(k, v);
        }
        self.model.nodes.push(node);
        outputs
    }

    /// Append a single-output node and return its output name.
    pub fn node(&mut self, op: &str, inputs: &[&str], attrs: Vec<(&str, Attribute)>) -> String {
        self.node_multi(op, inputs, 1, attrs).remove(0)
    }

    /// Append a fully specified node as is.
    pub fn push(&mut self, node: NodeSpec) {
        self.taken.insert(node.name.clone());
        self.taken.extend(node.outputs.iter().cloned());
        self.model.nodes.push(node);
    }

    /// Rename the most recently produced `tensor` so a graph output can use
    /// a stable name.
    pub fn rename(&mut self, tensor: &str, to: &str) -> String {
        let to = self.fresh(to);
        for n in &mut self.model.nodes {
            for t in n.inputs.iter_mut().chain(n.outputs.iter_mut()) {
                if t == tensor {
                    *t = to.clone();
                }
            }
        }
        to
    }

    pub fn output(&mut self, tensor: &str, dtype: DType, dims: Vec<Dim>) {
        self.model.outputs.push(TensorSpec::symbolic(tensor, dtype, dims));
    }

    pub fn model(&self) -> &GraphModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut GraphModel {
        &mut self.model
    }

    pub fn finish(self) -> Result<GraphModel> {
        self.model.validate_structure()?;
        Ok(self.model)
    }
}

/// Shorthand for attribute lists.
pub fn ints(v: &[i64]) -> Attribute {
    Attribute::Ints(v.to_vec())
}

pub fn int(v: i64) -> Attribute {
    Attribute::Int(v)
}

pub fn float(v: f32) -> Attribute {
    Attribute::Float(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_names_never_collide() {
        let mut b = GraphBuilder::new("g");
        let x = b.input_fixed("x", DType::Float32, &[2]);
        let x2 = b.fresh("x");
        assert_ne!(x, x2);
        let y = b.node("Relu", &[&x], vec![]);
        let z = b.node("Relu", &[&y], vec![]);
        assert_ne!(y, z);
        b.output(&z, DType::Float32, vec![Dim::Fixed(2)]);
        let m = b.finish().unwrap();
        assert_eq!(m.nodes.len(), 2);
        assert_ne!(m.nodes[0].name, m.nodes[1].name);
    }
}
