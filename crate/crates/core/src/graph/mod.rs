//! In-memory model graph: tensors, operator nodes, and fixed shapes.

pub mod builder;
mod onnx;
pub mod proto;
pub mod shape;
pub mod support;
mod topo;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{DType, TensorValue};

pub use onnx::{load_model, load_model_from_path, save_model, save_model_to_path};
pub use shape::{infer_node, infer_shapes, ShapeInfo, TensorInfo};
pub use support::{op_support, validate_support, Diagnostic, OpSupport};
pub use topo::topological_order;

/// The lowest default-domain opset accepted.
pub const MIN_OPSET: i64 = 13;

/// One tensor dimension as declared in a model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Dim {
    Fixed(usize),
    Symbolic(String),
    Unknown,
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Fixed(n) => write!(f, "{n}"),
            Dim::Symbolic(s) => f.write_str(s),
            Dim::Unknown => f.write_str("?"),
        }
    }
}

/// A named, typed graph tensor. `shape` is `None` when the model omits it.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Option<Vec<Dim>>,
}

impl TensorSpec {
    pub fn fixed(name: impl Into<String>, dtype: DType, shape: &[usize]) -> Self {
        TensorSpec {
            name: name.into(),
            dtype,
            shape: Some(shape.iter().map(|&d| Dim::Fixed(d)).collect()),
        }
    }

    pub fn symbolic(name: impl Into<String>, dtype: DType, dims: Vec<Dim>) -> Self {
        TensorSpec {
            name: name.into(),
            dtype,
            shape: Some(dims),
        }
    }

    /// The shape as concrete extents, failing on any unbound dimension.
    pub fn concrete_shape(&self) -> Result<Vec<usize>> {
        let dims = self.shape.as_ref().ok_or_else(|| Error::InvalidInput {
            name: self.name.clone(),
            msg: "shape not declared".into(),
        })?;
        dims.iter()
            .map(|d| match d {
                Dim::Fixed(n) => Ok(*n),
                Dim::Symbolic(s) => Err(Error::UnboundDimension(s.clone())),
                Dim::Unknown => Err(Error::UnboundDimension(format!("{}[?]", self.name))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attribute {
    Int(i64),
    Float(f32),
    Ints(Vec<i64>),
    Floats(Vec<f32>),
    String(String),
    Tensor(TensorValue),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeSpec {
    pub name: String,
    pub op_type: String,
    pub domain: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: BTreeMap<String, Attribute>,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, op_type: impl Into<String>, inputs: &[&str], outputs: &[&str]) -> Self {
        NodeSpec {
            name: name.into(),
            op_type: op_type.into(),
            domain: String::new(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: Attribute) -> Self {
        self.attributes.insert(key.to_string(), value);
        self
    }

    /// Name used in diagnostics: the node name, or `op_type(first output)`.
    pub fn label(&self) -> String {
        if self.name.is_empty() {
            format!("{}({})", self.op_type, self.outputs.first().map_or("", |s| s))
        } else {
            self.name.clone()
        }
    }

    /// The `i`-th input name, treating the empty string as an omitted input.
    pub fn input(&self, i: usize) -> Option<&str> {
        self.inputs.get(i).map(|s| s.as_str()).filter(|s| !s.is_empty())
    }

    pub fn attr(&self, key: &str) -> Option<&Attribute> {
        self.attributes.get(key)
    }

    pub fn attr_int(&self, key: &str, default: i64) -> i64 {
        match self.attributes.get(key) {
            Some(Attribute::Int(v)) => *v,
            _ => default,
        }
    }

    pub fn attr_float(&self, key: &str, default: f32) -> f32 {
        match self.attributes.get(key) {
            Some(Attribute::Float(v)) => *v,
            Some(Attribute::Int(v)) => *v as f32,
            _ => default,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<&[i64]> {
        match self.attributes.get(key) {
            Some(Attribute::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn attr_string(&self, key: &str) -> Option<&str> {
        match self.attributes.get(key) {
            Some(Attribute::String(v)) => Some(v),
            _ => None,
        }
    }
}

/// A parsed dataflow graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphModel {
    pub name: String,
    pub opset_version: i64,
    pub inputs: Vec<TensorSpec>,
    pub outputs: Vec<TensorSpec>,
    pub initializers: BTreeMap<String, TensorValue>,
    pub nodes: Vec<NodeSpec>,
    pub value_info: Vec<TensorSpec>,
}

impl GraphModel {
    /// Check naming invariants: unique tensor names, no dangling inputs,
    /// every graph output produced, initializers distinct from inputs.
    pub fn validate_structure(&self) -> Result<()> {
        let mut defined: HashSet<&str> = HashSet::new();
        for i in &self.inputs {
            if !defined.insert(&i.name) {
                return Err(Error::DuplicateName(i.name.clone()));
            }
        }
        for name in self.initializers.keys() {
            if !defined.insert(name) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        for n in &self.nodes {
            for o in n.outputs.iter().filter(|o| !o.is_empty()) {
                if !defined.insert(o) {
                    return Err(Error::DuplicateName(o.clone()));
                }
            }
        }
        for n in &self.nodes {
            for i in n.inputs.iter().filter(|i| !i.is_empty()) {
                if !defined.contains(i.as_str()) {
                    return Err(Error::DanglingInput {
                        node: n.label(),
                        tensor: i.clone(),
                    });
                }
            }
        }
        let mut seen_out = HashSet::new();
        for o in &self.outputs {
            if !defined.contains(o.name.as_str()) {
                return Err(Error::InvalidModel(format!(
                    "graph output `{}` is never produced",
                    o.name
                )));
            }
            if !seen_out.insert(&o.name) {
                return Err(Error::DuplicateName(o.name.clone()));
            }
        }
        Ok(())
    }

    pub fn input(&self, name: &str) -> Option<&TensorSpec> {
        self.inputs.iter().find(|t| t.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&TensorSpec> {
        self.outputs.iter().find(|t| t.name == name)
    }

    /// Map from tensor name to the index of the node producing it.
    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in n.outputs.iter().filter(|o| !o.is_empty()) {
                m.insert(o.as_str(), i);
            }
        }
        m
    }

    /// Every tensor name defined anywhere in the graph.
    pub fn tensor_names(&self) -> HashSet<String> {
        let mut s: HashSet<String> = self.inputs.iter().map(|t| t.name.clone()).collect();
        s.extend(self.initializers.keys().cloned());
        for n in &self.nodes {
            s.extend(n.outputs.iter().filter(|o| !o.is_empty()).cloned());
        }
        s
    }

    /// Substitute concrete extents for symbolic input dimensions.
    pub fn bind_dimensions(&self, bindings: &BTreeMap<String, usize>) -> Result<GraphModel> {
        if let Some((k, _)) = bindings.iter().find(|(_, &v)| v == 0) {
            return Err(Error::Config(format!("dimension `{k}` bound to zero")));
        }
        let bind = |spec: &TensorSpec, strict: bool| -> Result<TensorSpec> {
            let shape = match &spec.shape {
                None if strict => {
                    return Err(Error::InvalidInput {
                        name: spec.name.clone(),
                        msg: "graph input has no declared shape".into(),
                    })
                }
                None => None,
                Some(dims) => Some(
                    dims.iter()
                        .map(|d| match d {
                            Dim::Symbolic(s) => match bindings.get(s) {
                                Some(&v) => Ok(Dim::Fixed(v)),
                                None if strict => Err(Error::UnboundDimension(s.clone())),
                                None => Ok(Dim::Unknown),
                            },
                            Dim::Unknown if strict => Err(Error::UnboundDimension(format!("{}[?]", spec.name))),
                            d => Ok(d.clone()),
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            Ok(TensorSpec { shape, ..spec.clone() })
        };
        let mut out = self.clone();
        out.inputs = self.inputs.iter().map(|s| bind(s, true)).collect::<Result<_>>()?;
        out.outputs = self.outputs.iter().map(|s| bind(s, false)).collect::<Result<_>>()?;
        out.value_info = self.value_info.iter().map(|s| bind(s, false)).collect::<Result<_>>()?;
        Ok(out)
    }

    /// True when any node draws random values.
    pub fn random_node(&self) -> Option<&NodeSpec> {
        self.nodes
            .iter()
            .find(|n| matches!(n.op_type.as_str(), "RandomNormal" | "RandomUniform"))
    }
}
