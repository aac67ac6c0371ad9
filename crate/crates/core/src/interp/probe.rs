//! Brute-force non-interference probe: perturb one user's batch slice and
//! watch every other user's outputs for a bit-level change.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Interpreter;
use crate::checker::{BatchingConfig, InputSpec, OutputSpec};
use crate::error::{Error, Result};
use crate::graph::GraphModel;
use crate::tensor::json::TensorMap;
use crate::tensor::{DType, TensorValue};

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub trials: usize,
    pub seed: u64,
    /// Fixed starting inputs; when absent each trial draws fresh ones.
    pub base_inputs: Option<TensorMap>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            trials: 20,
            seed: 0,
            base_inputs: None,
        }
    }
}

/// Evidence that user `perturbed`'s data reached another user's output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub trial: usize,
    /// Batch index whose inputs were re-randomized.
    pub perturbed: usize,
    /// Batch index whose output changed; `None` for a shared output.
    pub observed: Option<usize>,
    pub output: String,
    pub index: Vec<usize>,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub interfered: bool,
    pub witness: Option<Witness>,
    pub trials_run: usize,
    /// Trials dropped because some float tensor was NaN or infinite.
    pub discarded_trials: usize,
}

pub(crate) fn random_tensor(rng: &mut impl Rng, dtype: DType, shape: &[usize]) -> TensorValue {
    let s = IxDyn(shape);
    match dtype {
        DType::Float32 => TensorValue::F32(ArrayD::from_shape_simple_fn(s, || rng.gen_range(-1.0f32..1.0))),
        DType::Int64 => TensorValue::I64(ArrayD::from_shape_simple_fn(s, || rng.gen_range(0..4))),
        DType::Int32 => TensorValue::I32(ArrayD::from_shape_simple_fn(s, || rng.gen_range(0..4))),
        DType::Uint8 => TensorValue::U8(ArrayD::from_shape_simple_fn(s, || rng.gen())),
        DType::Bool => TensorValue::Bool(ArrayD::from_shape_simple_fn(s, || rng.gen())),
    }
}

/// Random values for every graph input of a model with bound shapes.
pub fn random_inputs(model: &GraphModel, rng: &mut impl Rng) -> Result<TensorMap> {
    model
        .inputs
        .iter()
        .map(|i| Ok((i.name.clone(), random_tensor(rng, i.dtype, &i.concrete_shape()?))))
        .collect()
}

fn perturb(
    model: &GraphModel,
    config: &BatchingConfig,
    base: &TensorMap,
    j: usize,
    rng: &mut impl Rng,
) -> Result<TensorMap> {
    let mut out = base.clone();
    for spec in &model.inputs {
        if let Some(InputSpec::Batched { batch_axis }) = config.inputs.get(&spec.name) {
            let t = out.get_mut(&spec.name).expect("input present");
            let fresh = random_tensor(rng, t.dtype(), t.shape());
            t.splice_axis(&fresh, *batch_axis, j)?;
        }
    }
    Ok(out)
}

fn first_difference(a: &TensorValue, b: &TensorValue) -> Option<(Vec<usize>, f64, f64)> {
    let (ba, bb) = (a.element_bits(), b.element_bits());
    let k = ba.iter().zip(&bb).position(|(x, y)| x != y)?;
    let shape = a.shape();
    let mut index = vec![0; shape.len()];
    let mut rest = k;
    for d in (0..shape.len()).rev() {
        index[d] = rest % shape[d];
        rest /= shape[d];
    }
    Some((index, a.to_f64_vec()[k], b.to_f64_vec()[k]))
}

/// Differences between two executions visible to user `i` (or, with `None`,
/// in shared outputs).
fn observe(
    config: &BatchingConfig,
    model: &GraphModel,
    before: &TensorMap,
    after: &TensorMap,
    i: Option<usize>,
) -> Option<(String, Vec<usize>, f64, f64)> {
    for spec in &model.outputs {
        let (a, b) = (&before[&spec.name], &after[&spec.name]);
        match (config.outputs.get(&spec.name), i) {
            (Some(OutputSpec::Batched { batch_axis }), Some(i)) => {
                let (sa, sb) = (a.slice_axis(*batch_axis, i), b.slice_axis(*batch_axis, i));
                if let Some((mut idx, x, y)) = first_difference(&sa, &sb) {
                    idx[*batch_axis] = i;
                    return Some((spec.name.clone(), idx, x, y));
                }
            }
            (Some(OutputSpec::Shared), None) => {
                if let Some((idx, x, y)) = first_difference(a, b) {
                    return Some((spec.name.clone(), idx, x, y));
                }
            }
            _ => {}
        }
    }
    None
}

/// Search for cross-user interference by differential execution.
pub fn probe(model: &GraphModel, config: &BatchingConfig, options: &ProbeOptions) -> Result<ProbeReport> {
    if let Some(n) = model.random_node() {
        return Err(Error::Nondeterministic(n.label()));
    }
    let bound = config.bind_model(model)?;
    config.validate(&bound)?;
    let interp = Interpreter::new(&bound)?;
    if let Some(base) = &options.base_inputs {
        interp.check_inputs(base)?;
    }
    let b = config.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = ProbeReport {
        interfered: false,
        witness: None,
        trials_run: 0,
        discarded_trials: 0,
    };
    'trials: for trial in 0..options.trials {
        report.trials_run += 1;
        let base = match &options.base_inputs {
            Some(v) => v.clone(),
            None => random_inputs(&bound, &mut rng)?,
        };
        let (base_out, finite) = interp.execute_checked(&base, 0)?;
        if !finite {
            report.discarded_trials += 1;
            continue;
        }
        let mut runs = Vec::with_capacity(b);
        for j in 0..b {
            let inputs = perturb(&bound, config, &base, j, &mut rng)?;
            let (out, finite) = interp.execute_checked(&inputs, 0)?;
            if !finite {
                report.discarded_trials += 1;
                continue 'trials;
            }
            runs.push(out);
        }
        let observers = (0..b).map(Some).chain(std::iter::once(None));
        for i in observers {
            for (j, out) in runs.iter().enumerate() {
                if Some(j) == i {
                    continue;
                }
                if let Some((output, index, before, after)) = observe(config, &bound, &base_out, out, i) {
                    report.interfered = true;
                    report.witness = Some(Witness {
                        trial,
                        perturbed: j,
                        observed: i,
                        output,
                        index,
                        before,
                        after,
                    });
                    return Ok(report);
                }
            }
        }
    }
    Ok(report)
}
