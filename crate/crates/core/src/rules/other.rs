use ndarray::{ArrayD, IxDyn};

use super::{conservative, PropagationContext};
use crate::error::{Error, Result};
use crate::graph::shape::reduce_axes;
use crate::label::{broadcast_combine, fold, neutral, reduce, ShadowTensor};
use crate::tensor::movement as mv;

pub(super) fn reduction(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    let err = ctx.shape_err();
    let x = ctx.input(0)?;
    if ctx.node.op_type == "Softmax" {
        let axis = mv::normalize_axis(ctx.node.attr_int("axis", -1), x.ndim()).map_err(&err)?;
        let along = reduce(x, &[axis], true);
        return Ok(vec![mv::broadcast_to(&along, x.shape()).map_err(&err)?]);
    }
    let keep = ctx.node.attr_int("keepdims", 1) != 0;
    let out = match reduce_axes(ctx.node, &ctx.known, x.ndim()) {
        Ok(Some(axes)) => reduce(x, &axes, keep),
        Ok(None) => x.clone(),
        Err(Error::NonStatic { .. }) => return conservative(ctx),
        Err(e) => return Err(e),
    };
    Ok(vec![out])
}

pub(super) fn shape_like(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    match ctx.node.op_type.as_str() {
        "ConstantOfShape" => {
            let l = fold(ctx.input(0)?.iter());
            Ok(ctx.fill_outputs(l))
        }
        // Shapes are fixed after binding, so these carry no user data.
        _ => Ok(ctx.output_shapes.iter().map(|s| neutral(s)).collect()),
    }
}

pub(super) fn quantize_like(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    let err = ctx.shape_err();
    let x = ctx.input(0)?;
    if ctx.node.op_type == "DynamicQuantizeLinear" {
        // Scale and zero point are computed from the whole tensor, and every
        // quantized element depends on them.
        let g = fold(x.iter());
        let y = x.mapv(|l| l.combine(g));
        let scalar = ArrayD::from_elem(IxDyn(&[]), g);
        return Ok(vec![y, scalar.clone(), scalar]);
    }
    let param = |s: &ShadowTensor| -> Result<ShadowTensor> {
        if s.len() == 1 {
            return mv::reshape(s, &[]).map_err(&err);
        }
        let axis = mv::normalize_axis(ctx.node.attr_int("axis", 1), x.ndim()).map_err(&err)?;
        let mut shape = vec![1; x.ndim()];
        shape[axis] = s.len();
        mv::reshape(s, &shape).map_err(&err)
    };
    let mut y = broadcast_combine(x, &param(ctx.input(1)?)?).map_err(&err)?;
    if let Some(z) = ctx.inputs.get(2).copied().flatten() {
        y = broadcast_combine(&y, &param(z)?).map_err(&err)?;
    }
    Ok(vec![y])
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use crate::graph::{Attribute, NodeSpec};
    use crate::label::{neutral, LabelState};

    #[test]
    fn softmax_over_feature_axis_is_row_local() {
        let n = NodeSpec::new("sm", "Softmax", &["x"], &["y"]);
        let x = batched(&[2, 5]);
        let out = run(&n, &[Some(&x)], &[], &[&[2, 5]]).unwrap();
        assert_eq!(out[0], x);
        let n = n.with_attr("axis", Attribute::Int(0));
        let out = run(&n, &[Some(&x)], &[], &[&[2, 5]]).unwrap();
        assert!(out[0].iter().all(|l| l.is_multi_user()));
    }

    #[test]
    fn reduce_sum_over_batch_mixes() {
        let n = NodeSpec::new("r", "ReduceSum", &["x"], &["y"]).with_attr("axes", Attribute::Ints(vec![0]));
        let x = batched(&[2, 3]);
        let out = run(&n, &[Some(&x)], &[], &[&[1, 3]]).unwrap();
        assert!(out[0]
            .iter()
            .all(|l| l.classify() == LabelState::MultiUser { min: 1, max: 2 }));
    }

    #[test]
    fn dynamic_quantize_spreads_every_user() {
        let n = NodeSpec::new("q", "DynamicQuantizeLinear", &["x"], &["y", "s", "z"]);
        let x = batched(&[2, 4]);
        let out = run(&n, &[Some(&x)], &[], &[&[2, 4], &[], &[]]).unwrap();
        assert!(out.iter().all(|t| t.iter().all(|l| l.is_multi_user())));
        let x = batched(&[1, 4]);
        let out = run(&n, &[Some(&x)], &[], &[&[1, 4], &[], &[]]).unwrap();
        assert!(out[0].iter().all(|&l| l == u(1)));
    }

    #[test]
    fn shape_is_neutral() {
        let n = NodeSpec::new("s", "Shape", &["x"], &["y"]);
        let x = batched(&[2, 3]);
        let out = run(&n, &[Some(&x)], &[], &[&[2]]).unwrap();
        assert_eq!(out[0], neutral(&[2]));
    }
}
