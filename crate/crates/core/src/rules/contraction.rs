use ndarray::{ArrayD, IxDyn};

use super::PropagationContext;
use crate::error::Result;
use crate::graph::shape::conv_geometry;
use crate::label::{broadcast_combine, fold, reduce, Label, ShadowTensor};
use crate::tensor::movement as mv;

pub(super) fn contraction(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    match ctx.node.op_type.as_str() {
        "MatMul" => matmul(ctx),
        "Gemm" => gemm(ctx),
        _ => conv(ctx),
    }
}

/// `out[.., i, j]` joins row `i` of A with column `j` of B.
fn matmul(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    let err = ctx.shape_err();
    let (a, b) = (ctx.input(0)?, ctx.input(1)?);
    let a2 = if a.ndim() == 1 {
        mv::reshape(a, &[1, a.len()]).map_err(&err)?
    } else {
        a.clone()
    };
    let b2 = if b.ndim() == 1 {
        mv::reshape(b, &[b.len(), 1]).map_err(&err)?
    } else {
        b.clone()
    };
    let rows = reduce(&a2, &[a2.ndim() - 1], true);
    let cols = reduce(&b2, &[b2.ndim() - 2], true);
    let out = broadcast_combine(&rows, &cols).map_err(&err)?;
    let shape = mv::matmul_shape(a.shape(), b.shape()).map_err(&err)?;
    Ok(vec![mv::reshape(&out, &shape).map_err(&err)?])
}

fn gemm(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    let err = ctx.shape_err();
    let (a, b) = (ctx.input(0)?, ctx.input(1)?);
    let a = if ctx.node.attr_int("transA", 0) != 0 {
        a.t().to_owned()
    } else {
        a.clone()
    };
    let b = if ctx.node.attr_int("transB", 0) != 0 {
        b.t().to_owned()
    } else {
        b.clone()
    };
    let rows = reduce(&a, &[1], true);
    let cols = reduce(&b, &[0], true);
    let mut out = broadcast_combine(&rows, &cols).map_err(&err)?;
    if let Some(c) = ctx.inputs.get(2).copied().flatten() {
        out = broadcast_combine(&out, c).map_err(&err)?;
    }
    Ok(vec![out])
}

/// Each output pixel joins its receptive field over the group's input
/// channels with the output channel's filter and bias.
fn conv(ctx: &PropagationContext) -> Result<Vec<ShadowTensor>> {
    let (x, w) = (ctx.input(0)?, ctx.input(1)?);
    let g = conv_geometry(ctx.node, x.shape(), w.shape())?;
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = w.shape()[0];
    let (cg, og) = (c_in / g.group, c_out / g.group);
    let filter: Vec<Label> = (0..c_out)
        .map(|oc| {
            let f = fold(w.index_axis(ndarray::Axis(0), oc).iter());
            match ctx.inputs.get(2).copied().flatten() {
                Some(bias) => f.combine(bias[[oc]]),
                None => f,
            }
        })
        .collect();
    let [oh, ow] = g.out_hw;
    let mut out = ArrayD::from_elem(IxDyn(&[n, c_out, oh, ow]), Label::NEUTRAL);
    for b in 0..n {
        for oc in 0..c_out {
            let grp = oc / og;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = filter[oc];
                    for ci in 0..cg {
                        let ic = grp * cg + ci;
                        for ky in 0..g.kernel[0] {
                            let iy = (y * g.strides[0] + ky * g.dilations[0]) as isize - g.pads[0] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..g.kernel[1] {
                                let ix = (xo * g.strides[1] + kx * g.dilations[1]) as isize - g.pads[1] as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc = acc.combine(x[[b, ic, iy as usize, ix as usize]]);
                                }
                            }
                        }
                    }
                    out[[b, oc, y, xo]] = acc;
                }
            }
        }
    }
    Ok(vec![out])
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use crate::graph::{Attribute, NodeSpec};
    use crate::label::{neutral, LabelState};

    #[test]
    fn matmul_keeps_rows_apart() {
        let n = NodeSpec::new("mm", "MatMul", &["x", "w"], &["y"]);
        let x = batched(&[2, 3]);
        let w = neutral(&[3, 4]);
        let out = run(&n, &[Some(&x), Some(&w)], &[], &[&[2, 4]]).unwrap();
        assert_eq!(out[0], batched(&[2, 4]));
    }

    #[test]
    fn matmul_over_batch_axis_mixes() {
        // x^T x contracts the batch axis.
        let n = NodeSpec::new("mm", "MatMul", &["xt", "x"], &["y"]);
        let x = batched(&[2, 3]);
        let xt = x.t().to_owned();
        let out = run(&n, &[Some(&xt), Some(&x)], &[], &[&[3, 3]]).unwrap();
        assert!(out[0]
            .iter()
            .all(|l| l.classify() == LabelState::MultiUser { min: 1, max: 2 }));
    }

    #[test]
    fn matmul_vector_operand() {
        let n = NodeSpec::new("mm", "MatMul", &["x", "v"], &["y"]);
        let x = batched(&[2, 3]);
        let v = neutral(&[3]);
        let out = run(&n, &[Some(&x), Some(&v)], &[], &[&[2]]).unwrap();
        assert_eq!(out[0][[1]], u(2));
    }

    #[test]
    fn conv_stays_within_image() {
        let n = NodeSpec::new("conv", "Conv", &["x", "w"], &["y"]).with_attr("pads", Attribute::Ints(vec![1, 1, 1, 1]));
        let x = batched(&[2, 3, 4, 4]);
        let w = neutral(&[5, 3, 3, 3]);
        let out = run(&n, &[Some(&x), Some(&w)], &[], &[&[2, 5, 4, 4]]).unwrap();
        assert_eq!(out[0], batched(&[2, 5, 4, 4]));
    }

    #[test]
    fn gemm_with_bias() {
        let n = NodeSpec::new("gemm", "Gemm", &["a", "b", "c"], &["y"]).with_attr("transB", Attribute::Int(1));
        let a = batched(&[2, 3]);
        let b = neutral(&[4, 3]);
        let c = neutral(&[4]);
        let out = run(&n, &[Some(&a), Some(&b), Some(&c)], &[], &[&[2, 4]]).unwrap();
        assert_eq!(out[0], batched(&[2, 4]));
    }
}
