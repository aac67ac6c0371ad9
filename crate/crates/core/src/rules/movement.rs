use ndarray::ArrayD;

use super::{conservative, PropagationContext};
use crate::error::{Error, Result};
use crate::interp::movement::{apply, data_slots};
use crate::label::{broadcast_combine, fold, reduce, ShadowTensor};
use crate::tensor::movement as mv;

/// When every parameter input is known, move labels exactly as the values
/// move. `None` means some parameter is data-dependent.
fn deterministic(ctx: &PropagationContext) -> Result<Option<Vec<ShadowTensor>>> {
    let n = ctx.node.inputs.len();
    let slots = data_slots(&ctx.node.op_type, n);
    let params_known = (0..n)
        .filter(|i| !slots.contains(i))
        .all(|i| ctx.node.input(i).is_none() || ctx.known.get(i).copied().flatten().is_some());
    if !params_known {
        return Ok(None);
    }
    let data: Vec<Option<&ShadowTensor>> = (0..n)
        .map(|i| {
            if slots.contains(&i) {
                ctx.inputs.get(i).copied().flatten()
            } else {
                None
            }
        })
        .collect();
    match apply(ctx.node, &data, &ctx.known) {
        Ok(v) => Ok(Some(v)),
        Err(Error::NonStatic { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub(super) fn data_movement(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    match deterministic(ctx)? {
        Some(v) => Ok(v),
        None => conservative(ctx),
    }
}

/// With data-dependent indices an output element may come from anywhere
/// along the gathered axis, and also depends on the index that chose it.
pub(super) fn gather_like(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    if let Some(v) = deterministic(ctx)? {
        return Ok(v);
    }
    let err = ctx.shape_err();
    let (data, idx) = (ctx.input(0)?, ctx.input(1)?);
    let axis = mv::normalize_axis(ctx.node.attr_int("axis", 0), data.ndim()).map_err(&err)?;
    let along = reduce(data, &[axis], true);
    let zeros = ArrayD::<i64>::zeros(idx.raw_dim());
    let out = if ctx.node.op_type == "Gather" {
        let spread = mv::gather(&along, &zeros, axis).map_err(&err)?;
        let mut s = vec![1; axis];
        s.extend_from_slice(idx.shape());
        s.resize(s.len() + data.ndim() - axis - 1, 1);
        let idx = mv::reshape(idx, &s).map_err(&err)?;
        broadcast_combine(&spread, &idx).map_err(&err)?
    } else {
        let spread = mv::gather_elements(&along, &zeros, axis).map_err(&err)?;
        broadcast_combine(&spread, idx).map_err(&err)?
    };
    Ok(vec![out])
}

/// With data-dependent indices any element may be overwritten by any update.
pub(super) fn scatter_like(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    if let Some(v) = deterministic(ctx)? {
        return Ok(v);
    }
    let (data, idx, upd) = (ctx.input(0)?, ctx.input(1)?, ctx.input(2)?);
    let extra = fold(upd.iter()).combine(fold(idx.iter()));
    Ok(vec![data.mapv(|l| l.combine(extra))])
}
