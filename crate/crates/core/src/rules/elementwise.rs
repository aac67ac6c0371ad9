use ndarray::ArrayD;

use super::PropagationContext;
use crate::error::Result;
use crate::label::{broadcast_combine, Label, ShadowTensor};
use crate::tensor::movement as mv;
use crate::tensor::TensorValue;

pub(super) fn unary(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    Ok(vec![ctx.input(0)?.clone()])
}

/// Elements of a known operand that are exactly zero.
fn zero_mask(v: &TensorValue) -> ArrayD<bool> {
    match v {
        TensorValue::F32(a) => a.mapv(|x| x == 0.0),
        TensorValue::I64(a) => a.mapv(|x| x == 0),
        TensorValue::I32(a) => a.mapv(|x| x == 0),
        TensorValue::U8(a) => a.mapv(|x| x == 0),
        TensorValue::Bool(a) => a.mapv(|x| !x),
    }
}

pub(super) fn binary(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    let err = ctx.shape_err();
    let (a, b) = (ctx.input(0)?, ctx.input(1)?);
    let mut out = broadcast_combine(a, b).map_err(&err)?;
    if ctx.node.op_type == "Mul" && ctx.zero_mul_refinement {
        for k in ctx.known.iter().take(2).flatten() {
            let mask = zero_mask(k);
            if !mask.iter().any(|&z| z) {
                continue;
            }
            let mask = mv::broadcast_view(&mask, out.shape()).map_err(&err)?;
            ndarray::Zip::from(&mut out).and(&mask).for_each(|l, &z| {
                if z {
                    *l = Label::NEUTRAL;
                }
            });
        }
    }
    Ok(vec![out])
}

pub(super) fn select(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    let (c, x, y) = (ctx.input(0)?, ctx.input(1)?, ctx.input(2)?);
    let out = mv::zip3_with(c, x, y, |&c, &x, &y| c.combine(x).combine(y)).map_err(ctx.shape_err())?;
    Ok(vec![out])
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use crate::graph::NodeSpec;
    use crate::label::{neutral, Label, LabelState};
    use crate::tensor::TensorValue;

    #[test]
    fn add_broadcasts_rows() {
        let n = NodeSpec::new("add", "Add", &["a", "b"], &["c"]);
        let a = batched(&[2, 3]);
        let b = neutral(&[3]);
        let out = run(&n, &[Some(&a), Some(&b)], &[], &[&[2, 3]]).unwrap();
        assert_eq!(out[0], a);
    }

    #[test]
    fn mixing_rows_is_multi_user() {
        let n = NodeSpec::new("add", "Add", &["a", "b"], &["c"]);
        let a = batched(&[2, 1]);
        let b = batched(&[2, 1]).permuted_axes(ndarray::IxDyn(&[1, 0])).to_owned();
        let out = run(&n, &[Some(&a), Some(&b)], &[], &[&[2, 2]]).unwrap();
        assert_eq!(out[0][[0, 1]].classify(), LabelState::MultiUser { min: 1, max: 2 });
        assert_eq!(out[0][[1, 1]].classify(), LabelState::SingleUser(2));
    }

    #[test]
    fn multiplying_by_known_zero_clears_labels() {
        let n = NodeSpec::new("mul", "Mul", &["a", "m"], &["c"]);
        let a = batched(&[2, 2]);
        let mask = TensorValue::from_f32(&[2, 1], vec![0.0, 1.0]).unwrap();
        let ms = neutral(&[2, 1]);
        let out = run(&n, &[Some(&a), Some(&ms)], &[None, Some(&mask)], &[&[2, 2]]).unwrap();
        assert_eq!(out[0][[0, 0]], Label::NEUTRAL);
        assert_eq!(out[0][[1, 1]], u(2));
    }
}
