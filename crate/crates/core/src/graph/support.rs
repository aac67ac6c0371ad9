//! The supported operator set and support diagnostics.

use std::collections::HashSet;
use std::fmt;

use super::GraphModel;
use crate::rules::RuleKind;

/// One supported operator: it has both an interpreter kernel and a
/// label-propagation rule of the given kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpSupport {
    pub op_type: &'static str,
    pub rule: RuleKind,
}

macro_rules! ops {
    ($($kind:ident: [$($op:literal),* $(,)?]),* $(,)?) => {
        &[$($(OpSupport { op_type: $op, rule: RuleKind::$kind },)*)*]
    };
}

pub const SUPPORTED_OPS: &[OpSupport] = ops! {
    UnaryElementwise: ["Neg", "Relu", "Sigmoid", "Tanh", "Exp", "Sin", "Sqrt", "Cast", "Not"],
    BinaryElementwise: [
        "Add", "Sub", "Mul", "Div", "Greater", "GreaterOrEqual", "Less", "LessOrEqual", "Equal",
        "And", "Or",
    ],
    Contraction: ["MatMul", "Gemm", "Conv"],
    Reduction: ["ReduceSum", "ReduceMax", "ReduceMean", "Softmax"],
    DataMovement: [
        "Reshape", "Transpose", "Flatten", "Squeeze", "Unsqueeze", "Concat", "Split", "Slice",
        "Expand",
    ],
    GatherLike: ["Gather", "GatherElements"],
    ScatterLike: ["ScatterND"],
    ShapeLike: ["Shape", "Size", "Constant", "ConstantOfShape"],
    Select: ["Where"],
    RandomSource: ["RandomNormal", "RandomUniform"],
    QuantizeLike: ["DynamicQuantizeLinear", "DequantizeLinear"],
};

pub fn op_support(op_type: &str) -> Option<&'static OpSupport> {
    SUPPORTED_OPS.iter().find(|o| o.op_type == op_type)
}

/// One unsupported operator type, reported once at its first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub op_type: String,
    pub first_node: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.op_type, self.message)
    }
}

/// List every operator type lacking a kernel or propagation rule, in order
/// of first occurrence. An empty list means the model is fully supported.
pub fn validate_support(model: &GraphModel) -> Vec<Diagnostic> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for node in &model.nodes {
        let custom_domain = !node.domain.is_empty() && node.domain != "ai.onnx";
        if !custom_domain && op_support(&node.op_type).is_some() {
            continue;
        }
        let key = format!("{}::{}", node.domain, node.op_type);
        if !seen.insert(key) {
            continue;
        }
        let message = if custom_domain {
            format!("unsupported (custom domain `{}`)", node.domain)
        } else if matches!(node.op_type.as_str(), "If" | "Loop" | "Scan") {
            "unsupported (control flow out of scope)".to_string()
        } else {
            "unsupported (no propagation rule or kernel)".to_string()
        };
        out.push(Diagnostic {
            op_type: node.op_type.clone(),
            first_node: node.label(),
            message,
        });
    }
    out
}

/// Markdown table of the supported operators grouped by rule kind.
pub fn coverage_table() -> String {
    let mut s = String::from("| Rule kind | Operators |\n|---|---|\n");
    let mut kinds: Vec<RuleKind> = Vec::new();
    for o in SUPPORTED_OPS {
        if !kinds.contains(&o.rule) {
            kinds.push(o.rule);
        }
    }
    for k in kinds {
        let ops: Vec<_> = SUPPORTED_OPS
            .iter()
            .filter(|o| o.rule == k)
            .map(|o| o.op_type)
            .collect();
        s.push_str(&format!("| {k:?} | {} |\n", ops.join(", ")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeSpec, TensorSpec};
    use crate::tensor::DType;

    fn model(ops: &[&str]) -> GraphModel {
        let mut nodes = Vec::new();
        let mut prev = "x".to_string();
        for (i, op) in ops.iter().enumerate() {
            let out = format!("t{i}");
            nodes.push(NodeSpec::new(format!("n{i}"), *op, &[&prev], &[&out]));
            prev = out;
        }
        GraphModel {
            opset_version: 17,
            inputs: vec![TensorSpec::fixed("x", DType::Float32, &[2])],
            nodes,
            ..Default::default()
        }
    }

    #[test]
    fn supported_model_has_no_diagnostics() {
        assert!(validate_support(&model(&["Add", "MatMul", "Relu"])).is_empty());
    }

    #[test]
    fn loop_is_control_flow() {
        let d = validate_support(&model(&["Relu", "Loop"]));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].to_string(), "Loop: unsupported (control flow out of scope)");
    }

    #[test]
    fn diagnostics_follow_first_occurrence() {
        let d = validate_support(&model(&["Relu", "Erf", "If", "Erf", "LayerNormalization"]));
        let ops: Vec<_> = d.iter().map(|d| d.op_type.as_str()).collect();
        assert_eq!(ops, ["Erf", "If", "LayerNormalization"]);
        assert_eq!(d[0].first_node, "n1");
    }

    #[test]
    fn every_op_has_one_rule_kind() {
        let mut names = HashSet::new();
        for o in SUPPORTED_OPS {
            assert!(names.insert(o.op_type), "{} listed twice", o.op_type);
        }
        assert_eq!(names.len(), 48);
    }
}
