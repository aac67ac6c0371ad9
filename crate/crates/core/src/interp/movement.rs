//! Data-movement operators written once over the element type. The
//! interpreter runs them on values; the checker runs them on labels.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::graph::shape::{int_input, slice_selection, split_sizes, squeeze_axes, transpose_perm};
use crate::graph::{Attribute, NodeSpec};
use crate::tensor::movement as mv;
use crate::tensor::TensorValue;

/// Input slots that carry data (as opposed to shape or index parameters).
pub(crate) fn data_slots(op_type: &str, n_inputs: usize) -> Vec<usize> {
    match op_type {
        "Concat" => (0..n_inputs).collect(),
        "ScatterND" => vec![0, 2],
        _ => vec![0],
    }
}

pub(crate) fn is_movement(op_type: &str) -> bool {
    matches!(
        op_type,
        "Reshape"
            | "Transpose"
            | "Flatten"
            | "Squeeze"
            | "Unsqueeze"
            | "Concat"
            | "Split"
            | "Slice"
            | "Expand"
            | "Gather"
            | "GatherElements"
            | "ScatterND"
    )
}

fn index_param(node: &NodeSpec, params: &[Option<&TensorValue>], i: usize) -> Result<ArrayD<i64>> {
    let v = params.get(i).copied().flatten().ok_or_else(|| Error::NonStatic {
        node: node.label(),
        what: "indices".into(),
    })?;
    v.to_i64_array()
        .ok_or_else(|| Error::ty(&node.label(), "indices must be integers"))
}

/// Apply a data-movement node. `data[i]` must be present for every data
/// slot; `params[i]` supplies the value of every parameter slot.
pub(crate) fn apply<T: Clone>(
    node: &NodeSpec,
    data: &[Option<&ArrayD<T>>],
    params: &[Option<&TensorValue>],
) -> Result<Vec<ArrayD<T>>> {
    let label = node.label();
    let err = |m: String| Error::shape(&label, m);
    let oob = |m: String| Error::oob(&label, m);
    let x = || {
        data.first()
            .copied()
            .flatten()
            .ok_or_else(|| Error::MissingInput(format!("{label} input #0")))
    };
    let one = |a: ArrayD<T>| Ok(vec![a]);
    match node.op_type.as_str() {
        "Reshape" => {
            let x = x()?;
            let target =
                int_input(node, params, 1, "reshape target")?.ok_or_else(|| Error::MissingInput("shape".into()))?;
            let shape = mv::reshape_target(x.shape(), &target, node.attr_int("allowzero", 0) != 0).map_err(err)?;
            one(mv::reshape(x, &shape).map_err(err)?)
        }
        "Flatten" => {
            let x = x()?;
            let shape = mv::flatten_shape(x.shape(), node.attr_int("axis", 1)).map_err(err)?;
            one(mv::reshape(x, &shape).map_err(err)?)
        }
        "Squeeze" => {
            let x = x()?;
            let axes = squeeze_axes(node, params)?;
            let shape = mv::squeeze_shape(x.shape(), axes.as_deref()).map_err(err)?;
            one(mv::reshape(x, &shape).map_err(err)?)
        }
        "Unsqueeze" => {
            let x = x()?;
            let axes = squeeze_axes(node, params)?.ok_or_else(|| Error::MissingInput("axes".into()))?;
            let shape = mv::unsqueeze_shape(x.shape(), &axes).map_err(err)?;
            one(mv::reshape(x, &shape).map_err(err)?)
        }
        "Transpose" => {
            let x = x()?;
            let perm = transpose_perm(node, x.ndim())?;
            one(mv::transpose(x, &perm).map_err(err)?)
        }
        "Concat" => {
            let arrays = data
                .iter()
                .enumerate()
                .map(|(i, a)| a.ok_or_else(|| Error::MissingInput(format!("{label} input #{i}"))))
                .collect::<Result<Vec<_>>>()?;
            let shapes: Vec<&[usize]> = arrays.iter().map(|a| a.shape()).collect();
            let axis = match node.attr("axis") {
                Some(Attribute::Int(a)) => *a,
                _ => return Err(err("Concat requires `axis`".into())),
            };
            let (_, axis) = mv::concat_shape(&shapes, axis).map_err(err)?;
            one(mv::concat(&arrays, axis).map_err(err)?)
        }
        "Split" => {
            let x = x()?;
            let axis = mv::normalize_axis(node.attr_int("axis", 0), x.ndim()).map_err(err)?;
            let sizes = split_sizes(node, params, x.shape()[axis])?;
            Ok(mv::split(x, axis, &sizes))
        }
        "Slice" => {
            let x = x()?;
            let sel = slice_selection(node, params, x.shape())?;
            one(mv::slice(x, &sel))
        }
        "Expand" => {
            let x = x()?;
            let target =
                int_input(node, params, 1, "expand shape")?.ok_or_else(|| Error::MissingInput("shape".into()))?;
            let shape = mv::expand_shape(x.shape(), &target).map_err(err)?;
            one(mv::broadcast_to(x, &shape).map_err(err)?)
        }
        "Gather" => {
            let x = x()?;
            let axis = mv::normalize_axis(node.attr_int("axis", 0), x.ndim()).map_err(err)?;
            let idx = index_param(node, params, 1)?;
            one(mv::gather(x, &idx, axis).map_err(oob)?)
        }
        "GatherElements" => {
            let x = x()?;
            let axis = mv::normalize_axis(node.attr_int("axis", 0), x.ndim()).map_err(err)?;
            let idx = index_param(node, params, 1)?;
            one(mv::gather_elements(x, &idx, axis).map_err(oob)?)
        }
        "ScatterND" => {
            let x = x()?;
            let upd = data
                .get(2)
                .copied()
                .flatten()
                .ok_or_else(|| Error::MissingInput(format!("{label} updates")))?;
            let idx = index_param(node, params, 1)?;
            mv::scatter_nd_check(x.shape(), idx.shape(), upd.shape()).map_err(err)?;
            one(mv::scatter_nd(x, &idx, upd).map_err(oob)?)
        }
        other => Err(Error::UnsupportedOp(other.to_string())),
    }
}
