//! Concrete shape and element-type inference, with folding of values that
//! are fixed at analysis time (initializers, `Constant`, `Shape`, and
//! anything computed purely from those).

use std::collections::HashMap;

use super::{support::op_support, Dim, GraphModel, NodeSpec};
use crate::error::{Error, Result};
use crate::interp::eval_node;
use crate::tensor::movement::{self as mv, numel, Shape};
use crate::tensor::{DType, TensorValue};

/// Largest tensor folded into a known value during inference.
const FOLD_LIMIT: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: DType,
    pub shape: Shape,
}

impl TensorInfo {
    pub fn new(dtype: DType, shape: Shape) -> Self {
        TensorInfo { dtype, shape }
    }
}

/// Result of shape inference over a whole graph.
#[derive(Debug, Clone, Default)]
pub struct ShapeInfo {
    pub tensors: HashMap<String, TensorInfo>,
    /// Values fixed at analysis time, independent of every graph input.
    pub known: HashMap<String, TensorValue>,
    /// Topological node order used for inference.
    pub order: Vec<usize>,
    /// Output infos of each node by node index, including unnamed outputs.
    pub node_outputs: Vec<Vec<TensorInfo>>,
}

impl ShapeInfo {
    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.get(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape.as_slice())
    }
}

/// Infer every tensor's dtype and fixed shape. Input shapes must be concrete.
pub fn infer_shapes(model: &GraphModel) -> Result<ShapeInfo> {
    let order = super::topological_order(model)?;
    let mut info = ShapeInfo {
        order: order.clone(),
        node_outputs: vec![Vec::new(); model.nodes.len()],
        ..Default::default()
    };
    for input in &model.inputs {
        info.tensors.insert(
            input.name.clone(),
            TensorInfo::new(input.dtype, input.concrete_shape()?),
        );
    }
    for (name, value) in &model.initializers {
        info.tensors
            .insert(name.clone(), TensorInfo::new(value.dtype(), value.shape().to_vec()));
        info.known.insert(name.clone(), value.clone());
    }
    let declared: HashMap<&str, &super::TensorSpec> = model
        .value_info
        .iter()
        .chain(model.outputs.iter())
        .map(|s| (s.name.as_str(), s))
        .collect();

    for &i in &order {
        let node = &model.nodes[i];
        if op_support(&node.op_type).is_none() || !(node.domain.is_empty() || node.domain == "ai.onnx") {
            return Err(Error::UnsupportedOp(node.op_type.clone()));
        }
        let in_infos: Vec<Option<TensorInfo>> = node
            .inputs
            .iter()
            .map(|n| {
                if n.is_empty() {
                    None
                } else {
                    info.tensors.get(n).cloned()
                }
            })
            .collect();
        let known: Vec<Option<&TensorValue>> = node.inputs.iter().map(|n| info.known.get(n)).collect();
        let outs = match infer_node(node, &in_infos, &known) {
            Ok(o) => o,
            Err(Error::NonStatic { .. }) if all_declared(node, &declared) => node
                .outputs
                .iter()
                .map(|o| {
                    let s = declared[o.as_str()];
                    Ok(TensorInfo::new(s.dtype, s.concrete_shape()?))
                })
                .collect::<Result<Vec<_>>>()?,
            Err(e) => return Err(e.at_node(&node.label(), &node.op_type)),
        };

        let folded = fold_known(node, &known, &outs, &info).map_err(|e| e.at_node(&node.label(), &node.op_type))?;
        if node.outputs.len() > outs.len() {
            return Err(Error::InvalidModel(format!(
                "node `{}` declares {} outputs but {} has {}",
                node.label(),
                node.outputs.len(),
                node.op_type,
                outs.len()
            )));
        }
        info.node_outputs[i] = outs.clone();
        for (k, (name, ti)) in node.outputs.iter().zip(outs).enumerate() {
            if name.is_empty() {
                continue;
            }
            if let Some(vals) = &folded {
                info.known.insert(name.clone(), vals[k].clone());
            }
            info.tensors.insert(name.clone(), ti);
        }
    }

    for out in &model.outputs {
        let got = info
            .tensors
            .get(&out.name)
            .ok_or_else(|| Error::TensorNotFound(out.name.clone()))?;
        if got.dtype != out.dtype {
            return Err(Error::ty(
                &out.name,
                format!("declared {} but inferred {}", out.dtype, got.dtype),
            ));
        }
        if let Some(dims) = &out.shape {
            let ok = dims.len() == got.shape.len()
                && dims.iter().zip(&got.shape).all(|(d, &g)| match d {
                    Dim::Fixed(n) => *n == g,
                    _ => true,
                });
            if !ok {
                let decl: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
                return Err(Error::shape(
                    &out.name,
                    format!("declared [{}] but inferred {:?}", decl.join(","), got.shape),
                ));
            }
        }
    }
    Ok(info)
}

fn all_declared(node: &NodeSpec, declared: &HashMap<&str, &super::TensorSpec>) -> bool {
    node.outputs
        .iter()
        .all(|o| declared.get(o.as_str()).is_some_and(|s| s.concrete_shape().is_ok()))
}

fn fold_known(
    node: &NodeSpec,
    known: &[Option<&TensorValue>],
    outs: &[TensorInfo],
    info: &ShapeInfo,
) -> Result<Option<Vec<TensorValue>>> {
    match node.op_type.as_str() {
        "RandomNormal" | "RandomUniform" => return Ok(None),
        "Shape" => {
            let s = &info.tensors[&node.inputs[0]].shape;
            let (start, end) = shape_range(node, s.len());
            let v: Vec<i64> = s[start..end].iter().map(|&d| d as i64).collect();
            return Ok(Some(vec![TensorValue::vec_i64(&v)]));
        }
        "Size" => {
            let s = &info.tensors[&node.inputs[0]].shape;
            return Ok(Some(vec![TensorValue::scalar_i64(numel(s) as i64)]));
        }
        _ => {}
    }
    let all_known = node.inputs.iter().zip(known).all(|(n, k)| n.is_empty() || k.is_some());
    let small = outs.iter().map(|o| numel(&o.shape)).sum::<usize>() <= FOLD_LIMIT;
    if !all_known || !small {
        return Ok(None);
    }
    Ok(Some(eval_node(node, known, 0)?))
}

/// `[start, end)` of the dims reported by `Shape` (opset 15 attributes).
pub(crate) fn shape_range(node: &NodeSpec, rank: usize) -> (usize, usize) {
    let r = rank as i64;
    let clamp = |v: i64| (if v < 0 { v + r } else { v }).clamp(0, r) as usize;
    let start = clamp(node.attr_int("start", 0));
    let end = clamp(node.attr_int("end", r));
    (start, end.max(start))
}

fn shape_err(node: &NodeSpec) -> impl Fn(String) -> Error + '_ {
    move |m| Error::shape(&node.label(), m)
}

/// Read an integer-list parameter supplied as input `idx`.
/// `Ok(None)` when the input is omitted; `NonStatic` when it is not known.
pub(crate) fn int_input(
    node: &NodeSpec,
    known: &[Option<&TensorValue>],
    idx: usize,
    what: &str,
) -> Result<Option<Vec<i64>>> {
    if node.input(idx).is_none() {
        return Ok(None);
    }
    match known.get(idx).copied().flatten() {
        Some(v) => v
            .to_i64_vec()
            .map(Some)
            .ok_or_else(|| Error::ty(&node.label(), format!("{what} must be an integer tensor"))),
        None => Err(Error::NonStatic {
            node: node.label(),
            what: what.to_string(),
        }),
    }
}

/// Reduction axes from the `axes` attribute or the second input.
/// `Ok(None)` means the reduction is the identity.
pub(crate) fn reduce_axes(node: &NodeSpec, known: &[Option<&TensorValue>], rank: usize) -> Result<Option<Vec<usize>>> {
    let axes = match node.attr_ints("axes") {
        Some(a) => Some(a.to_vec()),
        None => int_input(node, known, 1, "reduction axes")?,
    };
    let noop = node.attr_int("noop_with_empty_axes", 0) != 0;
    mv::reduce_axes(rank, axes.as_deref(), noop).map_err(shape_err(node))
}

pub(crate) fn squeeze_axes(node: &NodeSpec, known: &[Option<&TensorValue>]) -> Result<Option<Vec<i64>>> {
    match node.attr_ints("axes") {
        Some(a) => Ok(Some(a.to_vec())),
        None => int_input(node, known, 1, "axes"),
    }
}

pub(crate) fn split_sizes(node: &NodeSpec, known: &[Option<&TensorValue>], extent: usize) -> Result<Vec<usize>> {
    let split = match node.attr_ints("split") {
        Some(s) => Some(s.to_vec()),
        None => int_input(node, known, 1, "split sizes")?,
    };
    mv::split_sizes(extent, node.outputs.len(), split.as_deref()).map_err(shape_err(node))
}

pub(crate) fn slice_selection(
    node: &NodeSpec,
    known: &[Option<&TensorValue>],
    shape: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let starts = int_input(node, known, 1, "slice starts")?.ok_or_else(|| Error::MissingInput("starts".into()))?;
    let ends = int_input(node, known, 2, "slice ends")?.ok_or_else(|| Error::MissingInput("ends".into()))?;
    let axes = int_input(node, known, 3, "slice axes")?;
    let steps = int_input(node, known, 4, "slice steps")?;
    mv::slice_indices(shape, &starts, &ends, axes.as_deref(), steps.as_deref()).map_err(shape_err(node))
}

pub(crate) fn transpose_perm(node: &NodeSpec, rank: usize) -> Result<Vec<usize>> {
    match node.attr_ints("perm") {
        Some(p) => p
            .iter()
            .map(|&x| usize::try_from(x).map_err(|_| Error::shape(&node.label(), "negative perm")))
            .collect(),
        None => Ok((0..rank).rev().collect()),
    }
}

/// Conv geometry: (kernel hw, strides, dilations, pads [hb, wb, he, we], group).
pub(crate) struct ConvGeometry {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    pub dilations: [usize; 2],
    pub pads: [usize; 4],
    pub group: usize,
    pub out_hw: [usize; 2],
}

pub(crate) fn conv_geometry(node: &NodeSpec, x: &[usize], w: &[usize]) -> Result<ConvGeometry> {
    let err = shape_err(node);
    if x.len() != 4 || w.len() != 4 {
        return Err(err("only 2-D convolution (NCHW) is supported".into()));
    }
    let pair = |key: &str| -> Result<[usize; 2]> {
        match node.attr_ints(key) {
            Some([a, b]) if *a > 0 && *b > 0 => Ok([*a as usize, *b as usize]),
            Some(_) => Err(err(format!("bad {key}"))),
            None => Ok([1, 1]),
        }
    };
    let strides = pair("strides")?;
    let dilations = pair("dilations")?;
    let kernel = match node.attr_ints("kernel_shape") {
        Some([a, b]) => [*a as usize, *b as usize],
        Some(_) => return Err(err("bad kernel_shape".into())),
        None => [w[2], w[3]],
    };
    if kernel != [w[2], w[3]] {
        return Err(err("kernel_shape disagrees with weights".into()));
    }
    let group = node.attr_int("group", 1);
    if group < 1 || !x[1].is_multiple_of(group as usize) || !w[0].is_multiple_of(group as usize) {
        return Err(err(format!("invalid group {group}")));
    }
    let group = group as usize;
    if w[1] * group != x[1] {
        return Err(err(format!(
            "weight channels {} x group {group} != input channels {}",
            w[1], x[1]
        )));
    }
    let auto_pad = node.attr_string("auto_pad").unwrap_or("NOTSET");
    let mut pads = [0usize; 4];
    match auto_pad {
        "NOTSET" => {
            if let Some(p) = node.attr_ints("pads") {
                if p.len() != 4 || p.iter().any(|&v| v < 0) {
                    return Err(err("bad pads".into()));
                }
                for (d, s) in pads.iter_mut().zip(p) {
                    *d = *s as usize;
                }
            }
        }
        "VALID" => {}
        "SAME_UPPER" | "SAME_LOWER" => {
            for k in 0..2 {
                let out = x[2 + k].div_ceil(strides[k]);
                let eff = (kernel[k] - 1) * dilations[k] + 1;
                let total = ((out - 1) * strides[k] + eff).saturating_sub(x[2 + k]);
                let small = total / 2;
                let (b, e) = if auto_pad == "SAME_UPPER" {
                    (small, total - small)
                } else {
                    (total - small, small)
                };
                pads[k] = b;
                pads[k + 2] = e;
            }
        }
        other => return Err(err(format!("unsupported auto_pad {other}"))),
    }
    let mut out_hw = [0; 2];
    for k in 0..2 {
        out_hw[k] =
            mv::conv_out_extent(x[2 + k], kernel[k], pads[k], pads[k + 2], strides[k], dilations[k]).map_err(&err)?;
    }
    Ok(ConvGeometry {
        kernel,
        strides,
        dilations,
        pads,
        group,
        out_hw,
    })
}

pub(crate) fn attr_dtype(node: &NodeSpec, key: &str, default: DType) -> Result<DType> {
    match node.attr(key) {
        Some(super::Attribute::Int(code)) => DType::from_onnx_code(*code as i32),
        _ => Ok(default),
    }
}

pub(crate) fn constant_value(node: &NodeSpec) -> Result<TensorValue> {
    use super::Attribute as A;
    let err = || Error::InvalidModel(format!("Constant `{}` has no supported value", node.label()));
    let (_, attr) = node.attributes.iter().next().ok_or_else(err)?;
    if node.attributes.len() != 1 {
        return Err(err());
    }
    Ok(match attr {
        A::Tensor(t) => t.clone(),
        A::Float(f) => TensorValue::scalar_f32(*f),
        A::Int(i) => TensorValue::scalar_i64(*i),
        A::Floats(v) => TensorValue::vec_f32(v),
        A::Ints(v) => TensorValue::vec_i64(v),
        A::String(_) => return Err(err()),
    })
}

fn need<'a>(node: &NodeSpec, inputs: &'a [Option<TensorInfo>], i: usize) -> Result<&'a TensorInfo> {
    inputs
        .get(i)
        .and_then(|x| x.as_ref())
        .ok_or_else(|| Error::MissingInput(format!("{} input #{i}", node.label())))
}

fn expect_dtype(node: &NodeSpec, t: &TensorInfo, allowed: &[DType]) -> Result<()> {
    if allowed.contains(&t.dtype) {
        Ok(())
    } else {
        Err(Error::ty(
            &node.label(),
            format!("unsupported element type {}", t.dtype),
        ))
    }
}

const NUMERIC: &[DType] = &[DType::Float32, DType::Int64, DType::Int32, DType::Uint8];
const SIGNED: &[DType] = &[DType::Float32, DType::Int64, DType::Int32];
const FLOAT: &[DType] = &[DType::Float32];
const INDEX: &[DType] = &[DType::Int64, DType::Int32];

/// Output dtypes and shapes of one node given its input infos and any
/// statically known input values.
pub fn infer_node(
    node: &NodeSpec,
    inputs: &[Option<TensorInfo>],
    known: &[Option<&TensorValue>],
) -> Result<Vec<TensorInfo>> {
    let label = node.label();
    let serr = shape_err(node);
    let one = |dtype: DType, shape: Shape| Ok(vec![TensorInfo::new(dtype, shape)]);
    match node.op_type.as_str() {
        "Neg" | "Relu" => {
            let x = need(node, inputs, 0)?;
            expect_dtype(node, x, SIGNED)?;
            one(x.dtype, x.shape.clone())
        }
        "Sigmoid" | "Tanh" | "Exp" | "Sin" | "Sqrt" => {
            let x = need(node, inputs, 0)?;
            expect_dtype(node, x, FLOAT)?;
            one(x.dtype, x.shape.clone())
        }
        "Not" => {
            let x = need(node, inputs, 0)?;
            expect_dtype(node, x, &[DType::Bool])?;
            one(DType::Bool, x.shape.clone())
        }
        "Cast" => {
            let x = need(node, inputs, 0)?;
            let to = match node.attr("to") {
                Some(super::Attribute::Int(c)) => DType::from_onnx_code(*c as i32)?,
                _ => return Err(Error::ty(&label, "Cast requires `to`")),
            };
            one(to, x.shape.clone())
        }
        "Add" | "Sub" | "Mul" | "Div" | "Greater" | "GreaterOrEqual" | "Less" | "LessOrEqual" | "Equal" | "And"
        | "Or" => {
            let (a, b) = (need(node, inputs, 0)?, need(node, inputs, 1)?);
            if a.dtype != b.dtype {
                return Err(Error::ty(
                    &label,
                    format!("operand types differ: {} vs {}", a.dtype, b.dtype),
                ));
            }
            let shape = mv::broadcast_shapes(&a.shape, &b.shape).map_err(&serr)?;
            let dtype = match node.op_type.as_str() {
                "Add" | "Sub" | "Mul" | "Div" => {
                    expect_dtype(node, a, NUMERIC)?;
                    a.dtype
                }
                "And" | "Or" => {
                    expect_dtype(node, a, &[DType::Bool])?;
                    DType::Bool
                }
                "Equal" => DType::Bool,
                _ => {
                    expect_dtype(node, a, NUMERIC)?;
                    DType::Bool
                }
            };
            one(dtype, shape)
        }
        "MatMul" => {
            let (a, b) = (need(node, inputs, 0)?, need(node, inputs, 1)?);
            expect_dtype(node, a, SIGNED)?;
            if a.dtype != b.dtype {
                return Err(Error::ty(&label, "MatMul operand types differ"));
            }
            one(a.dtype, mv::matmul_shape(&a.shape, &b.shape).map_err(&serr)?)
        }
        "Gemm" => {
            let (a, b) = (need(node, inputs, 0)?, need(node, inputs, 1)?);
            expect_dtype(node, a, FLOAT)?;
            if a.shape.len() != 2 || b.shape.len() != 2 || a.dtype != b.dtype {
                return Err(serr("Gemm operands must be matrices of one type".into()));
            }
            let (m, k) = if node.attr_int("transA", 0) != 0 {
                (a.shape[1], a.shape[0])
            } else {
                (a.shape[0], a.shape[1])
            };
            let (k2, n) = if node.attr_int("transB", 0) != 0 {
                (b.shape[1], b.shape[0])
            } else {
                (b.shape[0], b.shape[1])
            };
            if k != k2 {
                return Err(serr(format!("Gemm inner dims disagree: {k} vs {k2}")));
            }
            if let Some(c) = inputs.get(2).and_then(|c| c.as_ref()) {
                let s = mv::broadcast_shapes(&c.shape, &[m, n]).map_err(&serr)?;
                if s != [m, n] {
                    return Err(serr("Gemm C does not broadcast to (M, N)".into()));
                }
            }
            one(a.dtype, vec![m, n])
        }
        "Conv" => {
            let (x, w) = (need(node, inputs, 0)?, need(node, inputs, 1)?);
            expect_dtype(node, x, FLOAT)?;
            let g = conv_geometry(node, &x.shape, &w.shape)?;
            if let Some(b) = inputs.get(2).and_then(|b| b.as_ref()) {
                if b.shape != [w.shape[0]] {
                    return Err(serr("Conv bias must have one entry per output channel".into()));
                }
            }
            one(x.dtype, vec![x.shape[0], w.shape[0], g.out_hw[0], g.out_hw[1]])
        }
        "ReduceSum" | "ReduceMax" | "ReduceMean" => {
            let x = need(node, inputs, 0)?;
            expect_dtype(node, x, NUMERIC)?;
            let keep = node.attr_int("keepdims", 1) != 0;
            match reduce_axes(node, known, x.shape.len())? {
                None => one(x.dtype, x.shape.clone()),
                Some(axes) => one(x.dtype, mv::reduce_shape(&x.shape, &axes, keep)),
            }
        }
        "Softmax" => {
            let x = need(node, inputs, 0)?;
            expect_dtype(node, x, FLOAT)?;
            mv::normalize_axis(node.attr_int("axis", -1), x.shape.len()).map_err(&serr)?;
            one(x.dtype, x.shape.clone())
        }
        "Reshape" => {
            let x = need(node, inputs, 0)?;
            let target =
                int_input(node, known, 1, "reshape target")?.ok_or_else(|| Error::MissingInput("shape".into()))?;
            let allowzero = node.attr_int("allowzero", 0) != 0;
            one(
                x.dtype,
                mv::reshape_target(&x.shape, &target, allowzero).map_err(&serr)?,
            )
        }
        "Transpose" => {
            let x = need(node, inputs, 0)?;
            let perm = transpose_perm(node, x.shape.len())?;
            one(x.dtype, mv::transpose_shape(&x.shape, &perm).map_err(&serr)?)
        }
        "Flatten" => {
            let x = need(node, inputs, 0)?;
            one(
                x.dtype,
                mv::flatten_shape(&x.shape, node.attr_int("axis", 1)).map_err(&serr)?,
            )
        }
        "Squeeze" => {
            let x = need(node, inputs, 0)?;
            let axes = squeeze_axes(node, known)?;
            one(x.dtype, mv::squeeze_shape(&x.shape, axes.as_deref()).map_err(&serr)?)
        }
        "Unsqueeze" => {
            let x = need(node, inputs, 0)?;
            let axes = squeeze_axes(node, known)?.ok_or_else(|| Error::MissingInput("axes".into()))?;
            one(x.dtype, mv::unsqueeze_shape(&x.shape, &axes).map_err(&serr)?)
        }
        "Concat" => {
            let ins = (0..node.inputs.len())
                .map(|i| need(node, inputs, i))
                .collect::<Result<Vec<_>>>()?;
            if ins.iter().any(|t| t.dtype != ins[0].dtype) {
                return Err(Error::ty(&label, "Concat inputs differ in type"));
            }
            let shapes: Vec<&[usize]> = ins.iter().map(|t| t.shape.as_slice()).collect();
            let axis = match node.attr("axis") {
                Some(super::Attribute::Int(a)) => *a,
                _ => return Err(serr("Concat requires `axis`".into())),
            };
            let (shape, _) = mv::concat_shape(&shapes, axis).map_err(&serr)?;
            one(ins[0].dtype, shape)
        }
        "Split" => {
            let x = need(node, inputs, 0)?;
            let axis = mv::normalize_axis(node.attr_int("axis", 0), x.shape.len()).map_err(&serr)?;
            let sizes = split_sizes(node, known, x.shape[axis])?;
            Ok(sizes
                .into_iter()
                .map(|s| {
                    let mut shape = x.shape.clone();
                    shape[axis] = s;
                    TensorInfo::new(x.dtype, shape)
                })
                .collect())
        }
        "Slice" => {
            let x = need(node, inputs, 0)?;
            let sel = slice_selection(node, known, &x.shape)?;
            one(x.dtype, sel.iter().map(|s| s.len()).collect())
        }
        "Expand" => {
            let x = need(node, inputs, 0)?;
            let target =
                int_input(node, known, 1, "expand shape")?.ok_or_else(|| Error::MissingInput("shape".into()))?;
            one(x.dtype, mv::expand_shape(&x.shape, &target).map_err(&serr)?)
        }
        "Gather" => {
            let (x, idx) = (need(node, inputs, 0)?, need(node, inputs, 1)?);
            expect_dtype(node, idx, INDEX)?;
            let axis = mv::normalize_axis(node.attr_int("axis", 0), x.shape.len()).map_err(&serr)?;
            one(x.dtype, mv::gather_shape(&x.shape, &idx.shape, axis))
        }
        "GatherElements" => {
            let (x, idx) = (need(node, inputs, 0)?, need(node, inputs, 1)?);
            expect_dtype(node, idx, INDEX)?;
            let axis = mv::normalize_axis(node.attr_int("axis", 0), x.shape.len()).map_err(&serr)?;
            mv::gather_elements_check(&x.shape, &idx.shape, axis).map_err(&serr)?;
            one(x.dtype, idx.shape.clone())
        }
        "ScatterND" => {
            let (x, idx, upd) = (need(node, inputs, 0)?, need(node, inputs, 1)?, need(node, inputs, 2)?);
            expect_dtype(node, idx, &[DType::Int64])?;
            if upd.dtype != x.dtype {
                return Err(Error::ty(&label, "ScatterND updates type differs from data"));
            }
            if node.attr_string("reduction").is_some_and(|r| r != "none") {
                return Err(Error::ty(&label, "only reduction=none is supported"));
            }
            mv::scatter_nd_check(&x.shape, &idx.shape, &upd.shape).map_err(&serr)?;
            one(x.dtype, x.shape.clone())
        }
        "Shape" => {
            let x = need(node, inputs, 0)?;
            let (s, e) = shape_range(node, x.shape.len());
            one(DType::Int64, vec![e - s])
        }
        "Size" => {
            need(node, inputs, 0)?;
            one(DType::Int64, vec![])
        }
        "Constant" => {
            let v = constant_value(node)?;
            one(v.dtype(), v.shape().to_vec())
        }
        "ConstantOfShape" => {
            let dims = int_input(node, known, 0, "ConstantOfShape shape")?
                .ok_or_else(|| Error::MissingInput("shape".into()))?;
            if dims.iter().any(|&d| d < 0) {
                return Err(serr(format!("negative extent in {dims:?}")));
            }
            let dtype = match node.attr("value") {
                Some(super::Attribute::Tensor(t)) => t.dtype(),
                _ => DType::Float32,
            };
            one(dtype, dims.iter().map(|&d| d as usize).collect())
        }
        "Where" => {
            let (c, x, y) = (need(node, inputs, 0)?, need(node, inputs, 1)?, need(node, inputs, 2)?);
            expect_dtype(node, c, &[DType::Bool])?;
            if x.dtype != y.dtype {
                return Err(Error::ty(&label, "Where branches differ in type"));
            }
            let s = mv::broadcast_shapes(&c.shape, &x.shape).map_err(&serr)?;
            one(x.dtype, mv::broadcast_shapes(&s, &y.shape).map_err(&serr)?)
        }
        "RandomNormal" | "RandomUniform" => {
            let dtype = attr_dtype(node, "dtype", DType::Float32)?;
            if dtype != DType::Float32 {
                return Err(Error::ty(&label, "only float random outputs are supported"));
            }
            let shape = node
                .attr_ints("shape")
                .ok_or_else(|| serr("random op requires `shape`".into()))?;
            if shape.iter().any(|&d| d < 0) {
                return Err(serr("negative random shape".into()));
            }
            one(dtype, shape.iter().map(|&d| d as usize).collect())
        }
        "DynamicQuantizeLinear" => {
            let x = need(node, inputs, 0)?;
            expect_dtype(node, x, FLOAT)?;
            Ok(vec![
                TensorInfo::new(DType::Uint8, x.shape.clone()),
                TensorInfo::new(DType::Float32, vec![]),
                TensorInfo::new(DType::Uint8, vec![]),
            ])
        }
        "DequantizeLinear" => {
            let (x, s) = (need(node, inputs, 0)?, need(node, inputs, 1)?);
            expect_dtype(node, x, &[DType::Uint8, DType::Int32])?;
            expect_dtype(node, s, FLOAT)?;
            if numel(&s.shape) != 1 {
                let axis = mv::normalize_axis(node.attr_int("axis", 1), x.shape.len()).map_err(&serr)?;
                if s.shape != [x.shape[axis]] {
                    return Err(serr("per-axis scale length mismatch".into()));
                }
            }
            if let Some(z) = inputs.get(2).and_then(|z| z.as_ref()) {
                if z.dtype != x.dtype || z.shape != s.shape {
                    return Err(Error::ty(&label, "zero point must match input type and scale shape"));
                }
            }
            one(DType::Float32, x.shape.clone())
        }
        other => Err(Error::UnsupportedOp(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attribute, TensorSpec};

    fn info(d: DType, s: &[usize]) -> Option<TensorInfo> {
        Some(TensorInfo::new(d, s.to_vec()))
    }

    #[test]
    fn matmul_and_broadcast_rules() {
        let n = NodeSpec::new("mm", "MatMul", &["a", "b"], &["c"]);
        let out = infer_node(
            &n,
            &[info(DType::Float32, &[2, 3]), info(DType::Float32, &[3, 4])],
            &[None, None],
        )
        .unwrap();
        assert_eq!(out[0].shape, vec![2, 4]);
        let err = infer_node(
            &n,
            &[info(DType::Float32, &[2, 3]), info(DType::Float32, &[4, 4])],
            &[None, None],
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
        let n = NodeSpec::new("add", "Add", &["a", "b"], &["c"]);
        let out = infer_node(
            &n,
            &[info(DType::Float32, &[2, 1, 5]), info(DType::Float32, &[4, 5])],
            &[None, None],
        )
        .unwrap();
        assert_eq!(out[0].shape, vec![2, 4, 5]);
    }

    #[test]
    fn dynamic_quantize_yields_three_outputs() {
        let n = NodeSpec::new("q", "DynamicQuantizeLinear", &["x"], &["y", "s", "z"]);
        let out = infer_node(&n, &[info(DType::Float32, &[2, 8])], &[None]).unwrap();
        assert_eq!(out[0], TensorInfo::new(DType::Uint8, vec![2, 8]));
        assert_eq!(out[1], TensorInfo::new(DType::Float32, vec![]));
        assert_eq!(out[2], TensorInfo::new(DType::Uint8, vec![]));
    }

    #[test]
    fn reshape_needs_a_static_target() {
        let n = NodeSpec::new("r", "Reshape", &["x", "s"], &["y"]);
        let x = info(DType::Float32, &[2, 6]);
        let s = info(DType::Int64, &[2]);
        let target = TensorValue::vec_i64(&[3, -1]);
        let out = infer_node(&n, &[x.clone(), s.clone()], &[None, Some(&target)]).unwrap();
        assert_eq!(out[0].shape, vec![3, 4]);
        assert!(matches!(
            infer_node(&n, &[x, s], &[None, None]),
            Err(Error::NonStatic { .. })
        ));
    }

    #[test]
    fn shape_values_fold_through_the_graph() {
        // Reshape(x, Concat(Shape(x)[0:1], [-1])) must resolve statically.
        let m = GraphModel {
            opset_version: 17,
            inputs: vec![TensorSpec::fixed("x", DType::Float32, &[2, 3, 4])],
            outputs: vec![TensorSpec::fixed("y", DType::Float32, &[2, 12])],
            initializers: [("minus1".to_string(), TensorValue::vec_i64(&[-1]))].into(),
            nodes: vec![
                NodeSpec::new("shape", "Shape", &["x"], &["s"]).with_attr("end", Attribute::Int(1)),
                NodeSpec::new("cat", "Concat", &["s", "minus1"], &["t"]).with_attr("axis", Attribute::Int(0)),
                NodeSpec::new("reshape", "Reshape", &["x", "t"], &["y"]),
            ],
            ..Default::default()
        };
        let info = infer_shapes(&m).unwrap();
        assert_eq!(info.shape("y").unwrap(), &[2, 12]);
        assert_eq!(info.known["t"], TensorValue::vec_i64(&[2, -1]));
        assert!(!info.known.contains_key("y"));
    }

    #[test]
    fn declared_output_mismatch_is_reported() {
        let m = GraphModel {
            opset_version: 17,
            inputs: vec![TensorSpec::fixed("x", DType::Float32, &[2, 3])],
            outputs: vec![TensorSpec::fixed("y", DType::Float32, &[3, 2])],
            nodes: vec![NodeSpec::new("relu", "Relu", &["x"], &["y"])],
            ..Default::default()
        };
        assert!(matches!(infer_shapes(&m), Err(Error::Shape { .. })));
    }
}
