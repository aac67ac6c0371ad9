//! Shape arithmetic and element-type-agnostic tensor kernels.
//!
//! Everything in here is generic over the element type so the same code
//! rearranges float data in the interpreter and labels in shadow tensors.
//! Errors are plain messages; callers attach the node context.

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Dimension, IxDyn, Zip};

pub type Shape = Vec<usize>;
pub type Msg<T> = std::result::Result<T, String>;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn normalize_axis(axis: i64, rank: usize) -> Msg<usize> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(format!("axis {axis} out of range for rank {rank}"));
    }
    Ok(a as usize)
}

fn normalize_index(i: i64, extent: usize) -> Msg<usize> {
    let n = extent as i64;
    let j = if i < 0 { i + n } else { i };
    if j < 0 || j >= n {
        return Err(format!("index {i} out of bounds for extent {extent}"));
    }
    Ok(j as usize)
}

/// ONNX multidirectional (numpy-style) broadcasting.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Msg<Shape> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(format!("shapes {a:?} and {b:?} are not broadcast-compatible")),
        };
    }
    Ok(out)
}

pub fn broadcast_view<'a, T>(a: &'a ArrayD<T>, shape: &[usize]) -> Msg<ArrayViewD<'a, T>> {
    a.broadcast(IxDyn(shape))
        .ok_or_else(|| format!("cannot broadcast {:?} to {:?}", a.shape(), shape))
}

pub fn broadcast_to<T: Clone>(a: &ArrayD<T>, shape: &[usize]) -> Msg<ArrayD<T>> {
    Ok(broadcast_view(a, shape)?.to_owned())
}

pub fn zip_with<A, B, C>(a: &ArrayD<A>, b: &ArrayD<B>, f: impl Fn(&A, &B) -> C) -> Msg<ArrayD<C>> {
    let shape = broadcast_shapes(a.shape(), b.shape())?;
    let av = broadcast_view(a, &shape)?;
    let bv = broadcast_view(b, &shape)?;
    Ok(Zip::from(&av).and(&bv).map_collect(f))
}

pub fn zip3_with<A, B, C, D>(
    a: &ArrayD<A>,
    b: &ArrayD<B>,
    c: &ArrayD<C>,
    f: impl Fn(&A, &B, &C) -> D,
) -> Msg<ArrayD<D>> {
    let shape = broadcast_shapes(&broadcast_shapes(a.shape(), b.shape())?, c.shape())?;
    let av = broadcast_view(a, &shape)?;
    let bv = broadcast_view(b, &shape)?;
    let cv = broadcast_view(c, &shape)?;
    Ok(Zip::from(&av).and(&bv).and(&cv).map_collect(f))
}

/// Resolve a Reshape target (with `0` = copy and `-1` = infer).
pub fn reshape_target(input: &[usize], target: &[i64], allowzero: bool) -> Msg<Shape> {
    let total = numel(input);
    let mut out = Vec::with_capacity(target.len());
    let mut infer = None;
    for (i, &t) in target.iter().enumerate() {
        match t {
            -1 => {
                if infer.replace(i).is_some() {
                    return Err("more than one -1 in reshape target".into());
                }
                out.push(1);
            }
            0 if !allowzero => {
                let d = *input
                    .get(i)
                    .ok_or_else(|| format!("reshape target copies missing dim {i}"))?;
                out.push(d);
            }
            t if t < 0 => return Err(format!("invalid reshape extent {t}")),
            t => out.push(t as usize),
        }
    }
    if let Some(i) = infer {
        let known = numel(&out);
        if known == 0 || !total.is_multiple_of(known) {
            return Err(format!("cannot infer -1 reshaping {input:?} to {target:?}"));
        }
        out[i] = total / known;
    }
    if numel(&out) != total {
        return Err(format!("cannot reshape {input:?} to {out:?}"));
    }
    Ok(out)
}

pub fn reshape<T: Clone>(a: &ArrayD<T>, shape: &[usize]) -> Msg<ArrayD<T>> {
    let flat: Vec<T> = a.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).map_err(|e| e.to_string())
}

pub fn check_perm(perm: &[usize], rank: usize) -> Msg<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(format!("permutation {perm:?} does not match rank {rank}"));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(format!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn transpose<T: Clone>(a: &ArrayD<T>, perm: &[usize]) -> Msg<ArrayD<T>> {
    check_perm(perm, a.ndim())?;
    Ok(a.view().permuted_axes(IxDyn(perm)).as_standard_layout().into_owned())
}

pub fn transpose_shape(shape: &[usize], perm: &[usize]) -> Msg<Shape> {
    check_perm(perm, shape.len())?;
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

pub fn flatten_shape(shape: &[usize], axis: i64) -> Msg<Shape> {
    let r = shape.len() as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a > r {
        return Err(format!("flatten axis {axis} out of range for rank {r}"));
    }
    let a = a as usize;
    Ok(vec![numel(&shape[..a]), numel(&shape[a..])])
}

pub fn squeeze_shape(shape: &[usize], axes: Option<&[i64]>) -> Msg<Shape> {
    match axes {
        None => Ok(shape.iter().copied().filter(|&d| d != 1).collect()),
        Some(axes) => {
            let mut drop = vec![false; shape.len()];
            for &a in axes {
                let a = normalize_axis(a, shape.len())?;
                if shape[a] != 1 {
                    return Err(format!("cannot squeeze axis {a} of extent {}", shape[a]));
                }
                drop[a] = true;
            }
            Ok(shape.iter().zip(drop).filter(|(_, d)| !d).map(|(&s, _)| s).collect())
        }
    }
}

pub fn unsqueeze_shape(shape: &[usize], axes: &[i64]) -> Msg<Shape> {
    let rank = shape.len() + axes.len();
    let mut insert = vec![false; rank];
    for &a in axes {
        let a = normalize_axis(a, rank)?;
        if insert[a] {
            return Err(format!("duplicate unsqueeze axis {a}"));
        }
        insert[a] = true;
    }
    let mut src = shape.iter();
    Ok(insert
        .into_iter()
        .map(|ins| if ins { 1 } else { *src.next().unwrap() })
        .collect())
}

pub fn concat_shape(shapes: &[&[usize]], axis: i64) -> Msg<(Shape, usize)> {
    let first = shapes.first().ok_or("concat of zero tensors")?;
    let axis = normalize_axis(axis, first.len())?;
    let mut out = first.to_vec();
    for s in &shapes[1..] {
        if s.len() != first.len() {
            return Err("concat inputs differ in rank".into());
        }
        for (i, (&x, &y)) in s.iter().zip(first.iter()).enumerate() {
            if i != axis && x != y {
                return Err(format!("concat inputs disagree on dim {i}: {x} vs {y}"));
            }
        }
        out[axis] += s[axis];
    }
    Ok((out, axis))
}

pub fn concat<T: Clone>(arrays: &[&ArrayD<T>], axis: usize) -> Msg<ArrayD<T>> {
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    concatenate(Axis(axis), &views).map_err(|e| e.to_string())
}

pub fn split_sizes(extent: usize, n_outputs: usize, split: Option<&[i64]>) -> Msg<Vec<usize>> {
    match split {
        Some(s) => {
            if s.len() != n_outputs {
                return Err(format!("split has {} entries for {n_outputs} outputs", s.len()));
            }
            if s.iter().any(|&x| x < 0) || s.iter().sum::<i64>() as usize != extent {
                return Err(format!("split {s:?} does not sum to extent {extent}"));
            }
            Ok(s.iter().map(|&x| x as usize).collect())
        }
        None => {
            if n_outputs == 0 {
                return Err("split with no outputs".into());
            }
            let chunk = extent.div_ceil(n_outputs);
            let mut left = extent;
            Ok((0..n_outputs)
                .map(|_| {
                    let c = chunk.min(left);
                    left -= c;
                    c
                })
                .collect())
        }
    }
}

pub fn split<T: Clone>(a: &ArrayD<T>, axis: usize, sizes: &[usize]) -> Vec<ArrayD<T>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let idx: Vec<usize> = (start..start + n).collect();
            start += n;
            a.select(Axis(axis), &idx)
        })
        .collect()
}

/// Per-axis lists of selected indices for an ONNX Slice.
pub fn slice_indices(
    shape: &[usize],
    starts: &[i64],
    ends: &[i64],
    axes: Option<&[i64]>,
    steps: Option<&[i64]>,
) -> Msg<Vec<Vec<usize>>> {
    if starts.len() != ends.len() {
        return Err("slice starts/ends differ in length".into());
    }
    let mut sel: Vec<Vec<usize>> = shape.iter().map(|&d| (0..d).collect()).collect();
    let default_axes: Vec<i64> = (0..starts.len() as i64).collect();
    let axes = axes.unwrap_or(&default_axes);
    if axes.len() != starts.len() {
        return Err("slice axes length mismatch".into());
    }
    let mut touched = vec![false; shape.len()];
    for (k, &ax) in axes.iter().enumerate() {
        let ax = normalize_axis(ax, shape.len())?;
        if std::mem::replace(&mut touched[ax], true) {
            return Err(format!("slice axis {ax} repeated"));
        }
        let dim = shape[ax] as i64;
        let step = steps.map(|s| s[k]).unwrap_or(1);
        if step == 0 {
            return Err("slice step is zero".into());
        }
        let fix = |v: i64| if v < 0 { v + dim } else { v };
        let (mut s, mut e) = (fix(starts[k]), fix(ends[k]));
        let mut idx = Vec::new();
        if step > 0 {
            s = s.clamp(0, dim);
            e = e.clamp(0, dim);
            let mut i = s;
            while i < e {
                idx.push(i as usize);
                i += step;
            }
        } else {
            s = s.clamp(-1, dim - 1);
            e = e.clamp(-1, dim - 1);
            let mut i = s;
            while i > e {
                idx.push(i as usize);
                i += step;
            }
        }
        sel[ax] = idx;
    }
    Ok(sel)
}

pub fn slice<T: Clone>(a: &ArrayD<T>, sel: &[Vec<usize>]) -> ArrayD<T> {
    let mut out = a.clone();
    for (ax, idx) in sel.iter().enumerate() {
        if idx.len() != out.shape()[ax] || idx.iter().enumerate().any(|(i, &j)| i != j) {
            out = out.select(Axis(ax), idx);
        }
    }
    out
}

pub fn gather_shape(data: &[usize], indices: &[usize], axis: usize) -> Shape {
    let mut out = data[..axis].to_vec();
    out.extend_from_slice(indices);
    out.extend_from_slice(&data[axis + 1..]);
    out
}

pub fn gather<T: Clone>(data: &ArrayD<T>, indices: &ArrayD<i64>, axis: usize) -> Msg<ArrayD<T>> {
    let shape = data.shape();
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let flat = data.as_standard_layout();
    let src = flat.as_slice().expect("standard layout");
    let idx = indices
        .iter()
        .map(|&i| normalize_index(i, n))
        .collect::<Msg<Vec<_>>>()?;
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &k in &idx {
            let base = (o * n + k) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    let out_shape = gather_shape(shape, indices.shape(), axis);
    ArrayD::from_shape_vec(IxDyn(&out_shape), out).map_err(|e| e.to_string())
}

pub fn gather_elements_check(data: &[usize], indices: &[usize], axis: usize) -> Msg<()> {
    if data.len() != indices.len() {
        return Err("GatherElements rank mismatch".into());
    }
    for (i, (&d, &x)) in data.iter().zip(indices).enumerate() {
        if i != axis && x > d {
            return Err(format!("GatherElements indices dim {i} exceeds data"));
        }
    }
    Ok(())
}

pub fn gather_elements<T: Clone>(data: &ArrayD<T>, indices: &ArrayD<i64>, axis: usize) -> Msg<ArrayD<T>> {
    gather_elements_check(data.shape(), indices.shape(), axis)?;
    let n = data.shape()[axis];
    let mut out = Vec::with_capacity(indices.len());
    for (pos, &i) in indices.indexed_iter() {
        let mut src = pos.slice().to_vec();
        src[axis] = normalize_index(i, n)?;
        out.push(data[IxDyn(&src)].clone());
    }
    ArrayD::from_shape_vec(indices.raw_dim(), out).map_err(|e| e.to_string())
}

pub fn scatter_nd_check(data: &[usize], indices: &[usize], updates: &[usize]) -> Msg<usize> {
    let q = indices.len();
    if q == 0 {
        return Err("ScatterND indices must have rank >= 1".into());
    }
    let k = indices[q - 1];
    if k > data.len() {
        return Err(format!("ScatterND index depth {k} exceeds data rank {}", data.len()));
    }
    let mut expect = indices[..q - 1].to_vec();
    expect.extend_from_slice(&data[k..]);
    if expect != updates {
        return Err(format!("ScatterND updates shape {updates:?}, expected {expect:?}"));
    }
    Ok(k)
}

pub fn scatter_nd<T: Clone>(data: &ArrayD<T>, indices: &ArrayD<i64>, updates: &ArrayD<T>) -> Msg<ArrayD<T>> {
    let k = scatter_nd_check(data.shape(), indices.shape(), updates.shape())?;
    let mut out = data.as_standard_layout().into_owned();
    let inner = numel(&data.shape()[k..]);
    let idx = indices.as_standard_layout();
    let idx = idx.as_slice().unwrap();
    let upd = updates.as_standard_layout();
    let upd = upd.as_slice().unwrap();
    let shape = data.shape().to_vec();
    let dst = out.as_slice_mut().unwrap();
    let tuples = numel(&indices.shape()[..indices.ndim() - 1]);
    for t in 0..tuples {
        let tuple = &idx[t * k..(t + 1) * k];
        let mut offset = 0;
        for (d, &i) in tuple.iter().enumerate() {
            offset = offset * shape[d] + normalize_index(i, shape[d])?;
        }
        let base = offset * inner;
        dst[base..base + inner].clone_from_slice(&upd[t * inner..(t + 1) * inner]);
    }
    Ok(out)
}

/// Resolve reduction axes; `None` means the reduction is a no-op.
pub fn reduce_axes(rank: usize, axes: Option<&[i64]>, noop_with_empty: bool) -> Msg<Option<Vec<usize>>> {
    match axes {
        Some(a) if !a.is_empty() => {
            let mut out = a.iter().map(|&x| normalize_axis(x, rank)).collect::<Msg<Vec<_>>>()?;
            out.sort_unstable();
            out.dedup();
            Ok(Some(out))
        }
        _ if noop_with_empty => Ok(None),
        _ => Ok(Some((0..rank).collect())),
    }
}

pub fn reduce_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Shape {
    shape
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| match (axes.contains(&i), keepdims) {
            (true, true) => Some(1),
            (true, false) => None,
            (false, _) => Some(d),
        })
        .collect()
}

/// Fold over the reduced axes, visiting each group's elements in row-major
/// order so float accumulation is reproducible.
pub fn reduce_rowmajor<T, A, R>(
    a: &ArrayD<T>,
    axes: &[usize],
    keepdims: bool,
    init: A,
    fold: impl Fn(A, &T) -> A,
    finish: impl Fn(A, usize) -> R,
) -> ArrayD<R>
where
    A: Clone,
{
    let rank = a.ndim();
    let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
    let group: usize = axes.iter().map(|&i| a.shape()[i]).product();
    let perm: Vec<usize> = kept.iter().chain(axes.iter()).copied().collect();
    let view = a.view().permuted_axes(IxDyn(&perm));
    let out_shape = reduce_shape(a.shape(), axes, keepdims);
    let n_out = numel(&out_shape);
    let mut out = Vec::with_capacity(n_out);
    let mut it = view.iter();
    for _ in 0..n_out {
        let mut acc = init.clone();
        for _ in 0..group {
            acc = fold(acc, it.next().expect("reduction group"));
        }
        out.push(finish(acc, group));
    }
    ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("reduce shape")
}

/// Output shape of numpy-style matmul.
pub fn matmul_shape(a: &[usize], b: &[usize]) -> Msg<Shape> {
    if a.is_empty() || b.is_empty() {
        return Err("MatMul operands must have rank >= 1".into());
    }
    let a2: Shape = if a.len() == 1 { vec![1, a[0]] } else { a.to_vec() };
    let b2: Shape = if b.len() == 1 { vec![b[0], 1] } else { b.to_vec() };
    let (m, k) = (a2[a2.len() - 2], a2[a2.len() - 1]);
    let (k2, n) = (b2[b2.len() - 2], b2[b2.len() - 1]);
    if k != k2 {
        return Err(format!("MatMul inner dimensions disagree: {a:?} x {b:?}"));
    }
    let mut out = broadcast_shapes(&a2[..a2.len() - 2], &b2[..b2.len() - 2])?;
    if a.len() > 1 {
        out.push(m);
    }
    if b.len() > 1 {
        out.push(n);
    }
    Ok(out)
}

/// Expand's bidirectional broadcast against a requested shape.
pub fn expand_shape(input: &[usize], target: &[i64]) -> Msg<Shape> {
    if target.iter().any(|&t| t < 0) {
        return Err(format!("negative Expand extent in {target:?}"));
    }
    let t: Shape = target.iter().map(|&x| x as usize).collect();
    broadcast_shapes(input, &t)
}

/// Conv output spatial extents.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    pad_begin: usize,
    pad_end: usize,
    stride: usize,
    dilation: usize,
) -> Msg<usize> {
    let eff = (kernel - 1) * dilation + 1;
    let padded = input + pad_begin + pad_end;
    if padded < eff || stride == 0 {
        return Err(format!("conv kernel {eff} larger than padded input {padded}"));
    }
    Ok((padded - eff) / stride + 1)
}
