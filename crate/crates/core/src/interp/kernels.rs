//! Reference float32 kernels for every supported operator.
//!
//! Accumulations visit elements in row-major order (matmul and conv loop
//! over the contracted index in increasing order), so results are
//! reproducible bit for bit.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::movement;
use crate::error::{Error, Result};
use crate::graph::shape::{attr_dtype, constant_value, conv_geometry, reduce_axes, shape_range};
use crate::graph::{Attribute, NodeSpec};
use crate::tensor::movement::{self as mv, numel};
use crate::tensor::{DType, Element, TensorValue};
use crate::with_dtype;

pub(crate) trait Num: Element + PartialOrd {
    const ZERO: Self;
    const LOWEST: Self;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Option<Self>;
    fn neg(self) -> Self;
    fn from_count(n: usize) -> Self;
    fn is_nan(self) -> bool {
        false
    }
}

impl Num for f32 {
    const ZERO: Self = 0.0;
    const LOWEST: Self = f32::NEG_INFINITY;
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn div(self, o: Self) -> Option<Self> {
        Some(self / o)
    }
    fn neg(self) -> Self {
        -self
    }
    fn from_count(n: usize) -> Self {
        n as f32
    }
    fn is_nan(self) -> bool {
        f32::is_nan(self)
    }
}

macro_rules! int_num {
    ($t:ty) => {
        impl Num for $t {
            const ZERO: Self = 0;
            const LOWEST: Self = <$t>::MIN;
            fn add(self, o: Self) -> Self {
                self.wrapping_add(o)
            }
            fn sub(self, o: Self) -> Self {
                self.wrapping_sub(o)
            }
            fn mul(self, o: Self) -> Self {
                self.wrapping_mul(o)
            }
            fn div(self, o: Self) -> Option<Self> {
                self.checked_div(o)
            }
            fn neg(self) -> Self {
                self.wrapping_neg()
            }
            fn from_count(n: usize) -> Self {
                n as $t
            }
        }
    };
}

int_num!(i64);
int_num!(i32);
int_num!(u8);

trait CastElem: Element {
    fn to_f32(self) -> f32;
    fn to_i64(self) -> i64;
    fn to_i32(self) -> i32;
    fn to_u8(self) -> u8;
    fn to_bool(self) -> bool;
}

macro_rules! cast_elem {
    ($t:ty, $zero:expr, $as_bool:expr) => {
        impl CastElem for $t {
            fn to_f32(self) -> f32 {
                self as f32
            }
            fn to_i64(self) -> i64 {
                self as i64
            }
            fn to_i32(self) -> i32 {
                self as i32
            }
            fn to_u8(self) -> u8 {
                self as u8
            }
            fn to_bool(self) -> bool {
                self != $zero
            }
        }
    };
}

cast_elem!(f32, 0.0, ());
cast_elem!(i64, 0, ());
cast_elem!(i32, 0, ());
cast_elem!(u8, 0, ());

impl CastElem for bool {
    fn to_f32(self) -> f32 {
        self as u8 as f32
    }
    fn to_i64(self) -> i64 {
        self as i64
    }
    fn to_i32(self) -> i32 {
        self as i32
    }
    fn to_u8(self) -> u8 {
        self as u8
    }
    fn to_bool(self) -> bool {
        self
    }
}

fn cast_array<S: CastElem>(a: &ArrayD<S>, to: DType) -> TensorValue {
    match to {
        DType::Float32 => TensorValue::F32(a.mapv(S::to_f32)),
        DType::Int64 => TensorValue::I64(a.mapv(S::to_i64)),
        DType::Int32 => TensorValue::I32(a.mapv(S::to_i32)),
        DType::Uint8 => TensorValue::U8(a.mapv(S::to_u8)),
        DType::Bool => TensorValue::Bool(a.mapv(S::to_bool)),
    }
}

pub(crate) fn cast(v: &TensorValue, to: DType) -> TensorValue {
    match v {
        TensorValue::F32(a) => cast_array(a, to),
        TensorValue::I64(a) => cast_array(a, to),
        TensorValue::I32(a) => cast_array(a, to),
        TensorValue::U8(a) => cast_array(a, to),
        TensorValue::Bool(a) => cast_array(a, to),
    }
}

/// Apply a generic numeric expression to same-typed numeric operands.
macro_rules! numeric {
    ($node:expr, ($($v:ident),+) => |$t:ident| $body:expr) => {{
        let dtype = first_dtype(&[$($v),+]);
        match dtype {
            DType::Float32 => { type $t = f32; $(let $v = typed::<$t>($node, $v)?;)+ $body }
            DType::Int64 => { type $t = i64; $(let $v = typed::<$t>($node, $v)?;)+ $body }
            DType::Int32 => { type $t = i32; $(let $v = typed::<$t>($node, $v)?;)+ $body }
            DType::Uint8 => { type $t = u8; $(let $v = typed::<$t>($node, $v)?;)+ $body }
            DType::Bool => Err(Error::ty(&$node.label(), "numeric operator applied to bool")),
        }
    }};
}

fn first_dtype(vs: &[&TensorValue]) -> DType {
    vs[0].dtype()
}

fn typed<'a, T: Element>(node: &NodeSpec, v: &'a TensorValue) -> Result<&'a ArrayD<T>> {
    T::view(v).ok_or_else(|| {
        Error::ty(
            &node.label(),
            format!("expected {} operand, got {}", T::DTYPE, v.dtype()),
        )
    })
}

fn float<'a>(node: &NodeSpec, v: &'a TensorValue) -> Result<&'a ArrayD<f32>> {
    typed::<f32>(node, v)
}

fn elementwise_f32(node: &NodeSpec, x: &TensorValue, f: impl Fn(f32) -> f32) -> Result<TensorValue> {
    Ok(TensorValue::F32(float(node, x)?.mapv(f)))
}

fn binary<T: Num>(node: &NodeSpec, a: &ArrayD<T>, b: &ArrayD<T>) -> Result<TensorValue> {
    let label = node.label();
    let serr = |m: String| Error::shape(&label, m);
    let cmp =
        |f: fn(&T, &T) -> bool| -> Result<TensorValue> { Ok(TensorValue::Bool(mv::zip_with(a, b, f).map_err(serr)?)) };
    match node.op_type.as_str() {
        "Add" => Ok(T::wrap(mv::zip_with(a, b, |&x, &y| x.add(y)).map_err(serr)?)),
        "Sub" => Ok(T::wrap(mv::zip_with(a, b, |&x, &y| x.sub(y)).map_err(serr)?)),
        "Mul" => Ok(T::wrap(mv::zip_with(a, b, |&x, &y| x.mul(y)).map_err(serr)?)),
        "Div" => {
            let q = mv::zip_with(a, b, |&x, &y| x.div(y)).map_err(serr)?;
            if q.iter().any(|v| v.is_none()) {
                return Err(Error::InvalidInput {
                    name: label.clone(),
                    msg: "integer division by zero".into(),
                });
            }
            Ok(T::wrap(q.mapv(|v| v.unwrap())))
        }
        "Greater" => cmp(|x, y| x > y),
        "GreaterOrEqual" => cmp(|x, y| x >= y),
        "Less" => cmp(|x, y| x < y),
        "LessOrEqual" => cmp(|x, y| x <= y),
        "Equal" => cmp(|x, y| x == y),
        op => Err(Error::UnsupportedOp(op.to_string())),
    }
}

/// Batched matrix product with numpy broadcasting of leading dimensions.
pub(crate) fn matmul<T: Num>(a: &ArrayD<T>, b: &ArrayD<T>) -> mv::Msg<ArrayD<T>> {
    let out_shape = mv::matmul_shape(a.shape(), b.shape())?;
    let a2 = if a.ndim() == 1 {
        a.view()
            .into_shape_with_order(IxDyn(&[1, a.len()]))
            .map_err(|e| e.to_string())?
    } else {
        a.view()
    };
    let b2 = if b.ndim() == 1 {
        b.view()
            .into_shape_with_order(IxDyn(&[b.len(), 1]))
            .map_err(|e| e.to_string())?
    } else {
        b.view()
    };
    let (ra, rb) = (a2.ndim(), b2.ndim());
    let (m, k, n) = (a2.shape()[ra - 2], a2.shape()[ra - 1], b2.shape()[rb - 1]);
    let batch = mv::broadcast_shapes(&a2.shape()[..ra - 2], &b2.shape()[..rb - 2])?;
    let mut sa = batch.clone();
    sa.extend([m, k]);
    let mut sb = batch.clone();
    sb.extend([k, n]);
    let av = a2.broadcast(IxDyn(&sa)).ok_or("MatMul broadcast")?;
    let bv = b2.broadcast(IxDyn(&sb)).ok_or("MatMul broadcast")?;
    let av: Vec<T> = av.iter().copied().collect();
    let bv: Vec<T> = bv.iter().copied().collect();
    let nb = numel(&batch);
    let mut out = vec![T::ZERO; nb * m * n];
    for p in 0..nb {
        let (ao, bo, oo) = (p * m * k, p * k * n, p * m * n);
        for i in 0..m {
            let row = &mut out[oo + i * n..oo + (i + 1) * n];
            for kk in 0..k {
                let x = av[ao + i * k + kk];
                let brow = &bv[bo + kk * n..bo + (kk + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o = o.add(x.mul(y));
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&out_shape), out).map_err(|e| e.to_string())
}

fn gemm(node: &NodeSpec, inputs: &[Option<&TensorValue>]) -> Result<TensorValue> {
    let label = node.label();
    let serr = |m: String| Error::shape(&label, m);
    let a = float(node, req(node, inputs, 0)?)?;
    let b = float(node, req(node, inputs, 1)?)?;
    let a = if node.attr_int("transA", 0) != 0 {
        a.t().to_owned()
    } else {
        a.clone()
    };
    let b = if node.attr_int("transB", 0) != 0 {
        b.t().to_owned()
    } else {
        b.clone()
    };
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(serr("Gemm operands must be matrices".into()));
    }
    let alpha = node.attr_float("alpha", 1.0);
    let beta = node.attr_float("beta", 1.0);
    let mut y = matmul(&a, &b).map_err(serr)?;
    if alpha != 1.0 {
        y.mapv_inplace(|v| alpha * v);
    }
    if let Some(c) = inputs.get(2).copied().flatten() {
        let c = float(node, c)?;
        let cv = mv::broadcast_view(c, y.shape()).map_err(serr)?;
        ndarray::Zip::from(&mut y).and(&cv).for_each(|o, &c| *o += beta * c);
    }
    Ok(TensorValue::F32(y))
}

fn conv(node: &NodeSpec, inputs: &[Option<&TensorValue>]) -> Result<TensorValue> {
    let x = float(node, req(node, inputs, 0)?)?;
    let w = float(node, req(node, inputs, 1)?)?;
    let bias = inputs.get(2).copied().flatten().map(|b| float(node, b)).transpose()?;
    let g = conv_geometry(node, x.shape(), w.shape())?;
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = w.shape()[0];
    let cg = c_in / g.group;
    let og = c_out / g.group;
    let [oh, ow] = g.out_hw;
    let [kh, kw] = g.kernel;
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, c_out, oh, ow]));
    for b in 0..n {
        for oc in 0..c_out {
            let grp = oc / og;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..cg {
                        let ic = grp * cg + ci;
                        for ky in 0..kh {
                            let iy = (y * g.strides[0] + ky * g.dilations[0]) as isize - g.pads[0] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (xo * g.strides[1] + kx * g.dilations[1]) as isize - g.pads[1] as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[[b, ic, iy as usize, ix as usize]] * w[[oc, ci, ky, kx]];
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias[[oc]];
                    }
                    out[[b, oc, y, xo]] = acc;
                }
            }
        }
    }
    Ok(TensorValue::F32(out))
}

fn reduce<T: Num>(node: &NodeSpec, x: &ArrayD<T>, axes: Option<Vec<usize>>) -> TensorValue {
    let Some(axes) = axes else {
        return T::wrap(x.clone());
    };
    let keep = node.attr_int("keepdims", 1) != 0;
    let out = match node.op_type.as_str() {
        "ReduceSum" => mv::reduce_rowmajor(x, &axes, keep, T::ZERO, |a, &v| a.add(v), |a, _| a),
        "ReduceMean" => mv::reduce_rowmajor(
            x,
            &axes,
            keep,
            T::ZERO,
            |a, &v| a.add(v),
            |a, n| a.div(T::from_count(n)).unwrap_or(T::ZERO),
        ),
        _ => mv::reduce_rowmajor(
            x,
            &axes,
            keep,
            T::LOWEST,
            |a, &v| if !a.is_nan() && (v.is_nan() || v > a) { v } else { a },
            |a, _| a,
        ),
    };
    T::wrap(out)
}

fn softmax(node: &NodeSpec, x: &ArrayD<f32>) -> Result<ArrayD<f32>> {
    let axis = mv::normalize_axis(node.attr_int("axis", -1), x.ndim()).map_err(|m| Error::shape(&node.label(), m))?;
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let m = lane
            .iter()
            .fold(f32::NEG_INFINITY, |a, &v| if v > a || v.is_nan() { v } else { a });
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.iter().fold(0.0f32, |a, &v| a + v);
        lane.mapv_inplace(|v| v / s);
    }
    Ok(out)
}

/// Outputs `(y, scale, zero_point)` of dynamic uint8 quantization.
pub(crate) fn dynamic_quantize(x: &ArrayD<f32>) -> (ArrayD<u8>, f32, u8) {
    let (lo, hi) = x.iter().fold((0.0f32, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = (hi - lo) / 255.0;
    if scale == 0.0 {
        return (x.mapv(|_| 0), 0.0, 0);
    }
    let zp = (0.0 - lo / scale).clamp(0.0, 255.0).round_ties_even() as u8;
    let y = x.mapv(|v| ((v / scale).round_ties_even() + zp as f32).clamp(0.0, 255.0) as u8);
    (y, scale, zp)
}

fn dequantize(node: &NodeSpec, inputs: &[Option<&TensorValue>]) -> Result<TensorValue> {
    let label = node.label();
    let x = req(node, inputs, 0)?;
    let scale = float(node, req(node, inputs, 1)?)?;
    let xi: ArrayD<i64> = x
        .to_i64_array()
        .ok_or_else(|| Error::ty(&label, "bad quantized type"))?;
    let zp: ArrayD<i64> = match inputs.get(2).copied().flatten() {
        Some(z) => z
            .to_i64_array()
            .ok_or_else(|| Error::ty(&label, "bad zero point type"))?,
        None => ArrayD::zeros(scale.raw_dim()),
    };
    // Per-axis parameters broadcast along `axis`; scalars broadcast everywhere.
    let param_shape = if scale.len() == 1 {
        vec![]
    } else {
        let axis = mv::normalize_axis(node.attr_int("axis", 1), xi.ndim()).map_err(|m| Error::shape(&label, m))?;
        let mut s = vec![1; xi.ndim()];
        s[axis] = scale.len();
        s
    };
    let scale = mv::reshape(scale, &param_shape).map_err(|m| Error::shape(&label, m))?;
    let zp = mv::reshape(&zp, &param_shape).map_err(|m| Error::shape(&label, m))?;
    let wide = x.dtype() == DType::Int32;
    let y = mv::zip3_with(&xi, &zp, &scale, |&q, &z, &s| {
        let diff = if wide {
            (q as i32).wrapping_sub(z as i32)
        } else {
            (q - z) as i32
        };
        diff as f32 * s
    })
    .map_err(|m| Error::shape(&label, m))?;
    Ok(TensorValue::F32(y))
}

fn random(node: &NodeSpec, seed: u64) -> Result<TensorValue> {
    let shape: Vec<usize> = node
        .attr_ints("shape")
        .ok_or_else(|| Error::shape(&node.label(), "random op requires `shape`"))?
        .iter()
        .map(|&d| d.max(0) as usize)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = numel(&shape);
    let data: Vec<f32> = if node.op_type == "RandomNormal" {
        let d = Normal::new(node.attr_float("mean", 0.0), node.attr_float("scale", 1.0))
            .map_err(|e| Error::InvalidModel(format!("{}: {e}", node.label())))?;
        (0..n).map(|_| d.sample(&mut rng)).collect()
    } else {
        let (lo, hi) = (node.attr_float("low", 0.0), node.attr_float("high", 1.0));
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::InvalidModel(format!("{}: empty uniform range", node.label())));
        }
        let d = Uniform::new(lo, hi);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    };
    TensorValue::from_f32(&shape, data)
}

fn req<'a>(node: &NodeSpec, inputs: &[Option<&'a TensorValue>], i: usize) -> Result<&'a TensorValue> {
    inputs
        .get(i)
        .copied()
        .flatten()
        .ok_or_else(|| Error::MissingInput(format!("{} input #{i}", node.label())))
}

fn run_movement(node: &NodeSpec, inputs: &[Option<&TensorValue>]) -> Result<Vec<TensorValue>> {
    let slots = movement::data_slots(&node.op_type, node.inputs.len());
    let first = req(node, inputs, slots[0])?;
    with_dtype!(first.dtype(), T => {
        let mut data: Vec<Option<&ArrayD<T>>> = vec![None; inputs.len()];
        for &s in &slots {
            data[s] = Some(typed::<T>(node, req(node, inputs, s)?)?);
        }
        Ok(movement::apply(node, &data, inputs)?.into_iter().map(T::wrap).collect())
    })
}

/// Evaluate one node. `seed` feeds random operators and is ignored otherwise.
// Relu compares against zero generically, which is vacuous for u8.
#[allow(clippy::absurd_extreme_comparisons)]
pub fn eval_node(node: &NodeSpec, inputs: &[Option<&TensorValue>], seed: u64) -> Result<Vec<TensorValue>> {
    let label = node.label();
    let serr = |m: String| Error::shape(&label, m);
    let one = |v: TensorValue| Ok(vec![v]);
    let op = node.op_type.as_str();
    if movement::is_movement(op) {
        return run_movement(node, inputs);
    }
    match op {
        "Neg" => {
            let x = req(node, inputs, 0)?;
            numeric!(node, (x) => |T| one(T::wrap(x.mapv(|v| v.neg()))))
        }
        "Relu" => {
            let x = req(node, inputs, 0)?;
            numeric!(node, (x) => |T| one(T::wrap(x.mapv(|v| if v < T::ZERO { T::ZERO } else { v }))))
        }
        "Sigmoid" => one(elementwise_f32(node, req(node, inputs, 0)?, |v| {
            1.0 / (1.0 + (-v).exp())
        })?),
        "Tanh" => one(elementwise_f32(node, req(node, inputs, 0)?, f32::tanh)?),
        "Exp" => one(elementwise_f32(node, req(node, inputs, 0)?, f32::exp)?),
        "Sin" => one(elementwise_f32(node, req(node, inputs, 0)?, f32::sin)?),
        "Sqrt" => one(elementwise_f32(node, req(node, inputs, 0)?, f32::sqrt)?),
        "Not" => {
            let x = typed::<bool>(node, req(node, inputs, 0)?)?;
            one(TensorValue::Bool(x.mapv(|v| !v)))
        }
        "Cast" => {
            let to = match node.attr("to") {
                Some(Attribute::Int(c)) => DType::from_onnx_code(*c as i32)?,
                _ => return Err(Error::ty(&label, "Cast requires `to`")),
            };
            one(cast(req(node, inputs, 0)?, to))
        }
        "Add" | "Sub" | "Mul" | "Div" | "Greater" | "GreaterOrEqual" | "Less" | "LessOrEqual" => {
            let (a, b) = (req(node, inputs, 0)?, req(node, inputs, 1)?);
            numeric!(node, (a, b) => |T| one(binary::<T>(node, a, b)?))
        }
        "Equal" if req(node, inputs, 0)?.dtype() == DType::Bool => {
            let a = typed::<bool>(node, req(node, inputs, 0)?)?;
            let b = typed::<bool>(node, req(node, inputs, 1)?)?;
            one(TensorValue::Bool(mv::zip_with(a, b, |x, y| x == y).map_err(serr)?))
        }
        "Equal" => {
            let (a, b) = (req(node, inputs, 0)?, req(node, inputs, 1)?);
            numeric!(node, (a, b) => |T| one(binary::<T>(node, a, b)?))
        }
        "And" | "Or" => {
            let a = typed::<bool>(node, req(node, inputs, 0)?)?;
            let b = typed::<bool>(node, req(node, inputs, 1)?)?;
            let and = op == "And";
            one(TensorValue::Bool(
                mv::zip_with(a, b, |&x, &y| if and { x && y } else { x || y }).map_err(serr)?,
            ))
        }
        "MatMul" => {
            let (a, b) = (req(node, inputs, 0)?, req(node, inputs, 1)?);
            numeric!(node, (a, b) => |T| one(T::wrap(matmul(a, b).map_err(serr)?)))
        }
        "Gemm" => one(gemm(node, inputs)?),
        "Conv" => one(conv(node, inputs)?),
        "ReduceSum" | "ReduceMax" | "ReduceMean" => {
            let x = req(node, inputs, 0)?;
            let axes = reduce_axes(node, inputs, x.shape().len())?;
            numeric!(node, (x) => |T| one(reduce::<T>(node, x, axes)))
        }
        "Softmax" => one(TensorValue::F32(softmax(node, float(node, req(node, inputs, 0)?)?)?)),
        "Shape" => {
            let s = req(node, inputs, 0)?.shape();
            let (a, b) = shape_range(node, s.len());
            let v: Vec<i64> = s[a..b].iter().map(|&d| d as i64).collect();
            one(TensorValue::vec_i64(&v))
        }
        "Size" => one(TensorValue::scalar_i64(req(node, inputs, 0)?.len() as i64)),
        "Constant" => one(constant_value(node)?),
        "ConstantOfShape" => {
            let dims = req(node, inputs, 0)?
                .to_i64_vec()
                .ok_or_else(|| Error::ty(&label, "shape must be int64"))?;
            if dims.iter().any(|&d| d < 0) {
                return Err(serr(format!("negative extent in {dims:?}")));
            }
            let dims: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            let value = match node.attr("value") {
                Some(Attribute::Tensor(t)) if t.len() == 1 => t.clone(),
                Some(_) => return Err(Error::ty(&label, "value must hold one element")),
                None => TensorValue::scalar_f32(0.0),
            };
            one(crate::map_tensor!(&value, a => {
                let v = a.iter().next().copied().unwrap();
                ArrayD::from_elem(IxDyn(&dims), v)
            }))
        }
        "Where" => {
            let c = typed::<bool>(node, req(node, inputs, 0)?)?;
            let (x, y) = (req(node, inputs, 1)?, req(node, inputs, 2)?);
            with_dtype!(x.dtype(), T => {
                let (x, y) = (typed::<T>(node, x)?, typed::<T>(node, y)?);
                one(T::wrap(mv::zip3_with(c, x, y, |&c, &x, &y| if c { x } else { y }).map_err(serr)?))
            })
        }
        "RandomNormal" | "RandomUniform" => {
            attr_dtype(node, "dtype", DType::Float32)?;
            one(random(node, seed)?)
        }
        "DynamicQuantizeLinear" => {
            let (y, s, z) = dynamic_quantize(float(node, req(node, inputs, 0)?)?);
            Ok(vec![
                TensorValue::U8(y),
                TensorValue::scalar_f32(s),
                TensorValue::U8(ArrayD::from_elem(IxDyn(&[]), z)),
            ])
        }
        "DequantizeLinear" => one(dequantize(node, inputs)?),
        other => Err(Error::UnsupportedOp(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(op: &str, n_in: usize) -> NodeSpec {
        let ins: Vec<String> = (0..n_in).map(|i| format!("i{i}")).collect();
        let refs: Vec<&str> = ins.iter().map(|s| s.as_str()).collect();
        NodeSpec::new("n", op, &refs, &["o"])
    }

    fn f(shape: &[usize], v: &[f32]) -> TensorValue {
        TensorValue::from_f32(shape, v.to_vec()).unwrap()
    }

    fn run(n: &NodeSpec, ins: &[&TensorValue]) -> TensorValue {
        let ins: Vec<Option<&TensorValue>> = ins.iter().map(|&v| Some(v)).collect();
        eval_node(n, &ins, 0).unwrap().remove(0)
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = f(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = f(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        let c = run(&node("MatMul", 2), &[&a, &b]);
        assert_eq!(c.to_f64_vec(), vec![58., 64., 139., 154.]);
        // Vector times matrix drops the leading 1.
        let v = f(&[3], &[1., 0., 1.]);
        assert_eq!(run(&node("MatMul", 2), &[&v, &b]).shape(), &[2]);
    }

    #[test]
    fn batched_matmul_broadcasts() {
        let a = f(&[2, 1, 2], &[1., 2., 3., 4.]);
        let b = f(&[2, 1], &[10., 100.]);
        let c = run(&node("MatMul", 2), &[&a, &b]);
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.to_f64_vec(), vec![210., 430.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = f(&[2, 3], &[1., 2., 3., 0., 0., 0.]);
        let y = run(&node("Softmax", 1), &[&x]).to_f64_vec();
        assert!((y[0] + y[1] + y[2] - 1.0).abs() < 1e-6);
        assert!((y[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn reduce_max_keeps_nan() {
        let x = f(&[3], &[1., f32::NAN, 2.]);
        let n = node("ReduceMax", 1).with_attr("keepdims", Attribute::Int(0));
        assert!(run(&n, &[&x]).to_f64_vec()[0].is_nan());
    }

    #[test]
    fn dynamic_quantize_reference_values() {
        // Worked example from the operator definition.
        let x = ArrayD::from_shape_vec(IxDyn(&[6]), vec![0., 2., -3., -2.5, 1.34, 0.5]).unwrap();
        let (y, s, z) = dynamic_quantize(&x);
        assert!((s - 0.019_607_844).abs() < 1e-9);
        assert_eq!(z, 153);
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![153, 255, 0, 26, 221, 179]);
        let (y, s, z) = dynamic_quantize(&ArrayD::zeros(IxDyn(&[3])));
        assert_eq!((s, z), (0.0, 0));
        assert!(y.iter().all(|&v| v == 0));
    }

    #[test]
    fn dequantize_per_axis() {
        let x = TensorValue::U8(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![10, 20, 30, 40]).unwrap());
        let s = TensorValue::vec_f32(&[0.5, 2.0]);
        let z = TensorValue::U8(ArrayD::from_shape_vec(IxDyn(&[2]), vec![10, 0]).unwrap());
        let y = run(&node("DequantizeLinear", 3), &[&x, &s, &z]);
        assert_eq!(y.to_f64_vec(), vec![0., 40., 10., 80.]);
    }

    #[test]
    fn integer_division_truncates_and_rejects_zero() {
        let a = TensorValue::vec_i64(&[7, -7]);
        let b = TensorValue::vec_i64(&[2, 2]);
        assert_eq!(run(&node("Div", 2), &[&a, &b]).to_i64_vec().unwrap(), vec![3, -3]);
        let z = TensorValue::vec_i64(&[0, 1]);
        let ins = [Some(&a), Some(&z)];
        assert!(eval_node(&node("Div", 2), &ins, 0).is_err());
    }

    #[test]
    fn conv_with_padding() {
        let x = f(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let w = f(&[1, 1, 2, 2], &[1., 1., 1., 1.]);
        let n = node("Conv", 2).with_attr("pads", Attribute::Ints(vec![1, 1, 0, 0]));
        let y = run(&n, &[&x, &w]);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_f64_vec(), vec![1., 3., 4., 10.]);
    }

    #[test]
    fn cast_saturates_and_truncates() {
        let x = f(&[3], &[1.7, -2.5, 300.0]);
        let n = node("Cast", 1).with_attr("to", Attribute::Int(7));
        assert_eq!(run(&n, &[&x]).to_i64_vec().unwrap(), vec![1, -2, 300]);
        let n = node("Cast", 1).with_attr("to", Attribute::Int(9));
        assert_eq!(run(&n, &[&x]).to_f64_vec(), vec![1., 1., 1.]);
    }

    #[test]
    fn random_is_seeded() {
        let n = node("RandomNormal", 0).with_attr("shape", Attribute::Ints(vec![4]));
        let a = eval_node(&n, &[], 5).unwrap();
        let b = eval_node(&n, &[], 5).unwrap();
        let c = eval_node(&n, &[], 6).unwrap();
        assert!(a[0].bit_eq(&b[0]));
        assert!(!a[0].bit_eq(&c[0]));
    }
}
