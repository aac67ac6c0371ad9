//! Architectural backdoors that break batch isolation: a trigger detector
//! reading one batch slot of a K-cache-like tensor, wired to a multiplexer
//! that moves rows between batch positions (Get, Set) or an additive edit
//! of the victim's row (Steer).
//!
//! All builders append to a [`GraphBuilder`]; [`inject`] splices them onto
//! an existing model so the target tensor's consumers read the backdoored
//! value.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::builder::{int, GraphBuilder};
use crate::graph::{infer_shapes, save_model_to_path, topological_order, validate_support, Dim, GraphModel, ShapeInfo};
use crate::interp::{execute, execute_traced};
use crate::tensor::json::{write_tensor_file, TensorMap};
use crate::tensor::{DType, TensorValue};

/// Where and how the trigger is recognised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    /// Tensor read by the detector, batch on axis 0.
    pub source_tensor: String,
    pub attacker_batch_index: usize,
    /// Positions gathered along `seq_axis` of the attacker's slice.
    pub token_positions: Vec<usize>,
    pub seq_axis: usize,
    pub trigger_const: f32,
    pub delta: f32,
}

impl TriggerSpec {
    /// Attacker 0, positions [1, 2] on axis 2, delta 0.01, constant unset.
    pub fn new(source_tensor: &str) -> Self {
        TriggerSpec {
            source_tensor: source_tensor.to_string(),
            attacker_batch_index: 0,
            token_positions: vec![1, 2],
            seq_axis: 2,
            trigger_const: 0.0,
            delta: 0.01,
        }
    }

    pub fn with_const(mut self, c: f32) -> Self {
        self.trigger_const = c;
        self
    }

    fn check_source(&self, shape: &[usize]) -> Result<()> {
        let bad = |m: String| Err(Error::Plan(m));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive and finite, got {}", self.delta));
        }
        if !self.trigger_const.is_finite() {
            return bad("trigger constant must be finite".into());
        }
        if self.token_positions.is_empty() {
            return bad("no token positions".into());
        }
        if self.seq_axis == 0 || self.seq_axis >= shape.len() {
            return bad(format!(
                "sequence axis {} invalid for `{}` of shape {shape:?}",
                self.seq_axis, self.source_tensor
            ));
        }
        if self.attacker_batch_index >= shape[0] {
            return bad(format!(
                "attacker index {} outside batch of {}",
                self.attacker_batch_index, shape[0]
            ));
        }
        let len = shape[self.seq_axis];
        if let Some(p) = self.token_positions.iter().find(|&&p| p >= len) {
            return bad(format!("token position {p} outside sequence of {len}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerMode {
    /// `x + trigger * scale * v` on the victim's row.
    Activation,
    /// `x - trigger * scale * (x . r) r` on the victim's row with `r = v/|v|`,
    /// i.e. the victim's output projection `W` replaced by `W - scale r r^T W`.
    WeightProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// Copy the victim's row into the attacker's position.
    Get { victim_index: usize },
    /// Copy the attacker's row into the victim's position.
    Set { victim_index: usize },
    /// Shift the victim's row along `steering_vector`.
    Steer {
        victim_index: usize,
        steering_vector: Vec<f32>,
        scale: f32,
        mode: SteerMode,
    },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Get { .. } => "get",
            AttackKind::Set { .. } => "set",
            AttackKind::Steer { .. } => "steer",
        }
    }

    pub fn victim(&self) -> usize {
        match self {
            AttackKind::Get { victim_index } | AttackKind::Set { victim_index } => *victim_index,
            AttackKind::Steer { victim_index, .. } => *victim_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub trigger: TriggerSpec,
    pub attack: AttackKind,
    /// Tensor whose batch rows are rerouted or edited; batch on axis 0.
    pub target_tensor: String,
    /// Batch size the backdoor is built for. Get and Set work at any batch
    /// size that contains both indices; Steer's victim mask has this extent.
    pub batch_size: usize,
}

impl InjectionPlan {
    fn check(&self) -> Result<()> {
        let (a, v) = (self.trigger.attacker_batch_index, self.attack.victim());
        if a == v {
            return Err(Error::Plan(format!("attacker and victim are both batch index {a}")));
        }
        if v >= self.batch_size {
            return Err(Error::Plan(format!(
                "victim index {v} outside batch of {}",
                self.batch_size
            )));
        }
        if let AttackKind::Steer {
            steering_vector, scale, ..
        } = &self.attack
        {
            if !scale.is_finite() || steering_vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::Plan("steering vector and scale must be finite".into()));
            }
        }
        Ok(())
    }
}

/// The backdoored model and what was added to it.
#[derive(Debug, Clone)]
pub struct Injection {
    pub model: GraphModel,
    pub node_delta: usize,
    /// Names of the added nodes.
    pub added_nodes: Vec<String>,
    /// The detector's 0/1 int64 scalar.
    pub trigger_output: String,
}

fn i64_const(b: &mut GraphBuilder, hint: &str, v: &[i64]) -> String {
    b.constant(hint, TensorValue::vec_i64(v))
}

/// Gather the attacker slice at the token positions and sum it (three nodes).
fn detector_sum(b: &mut GraphBuilder, spec: &TriggerSpec, source: &str) -> String {
    let who = i64_const(b, "attacker_index", &[spec.attacker_batch_index as i64]);
    let pos: Vec<i64> = spec.token_positions.iter().map(|&p| p as i64).collect();
    let pos = i64_const(b, "token_positions", &pos);
    let x = b.node("Gather", &[source, &who], vec![("axis", int(0))]);
    let x = b.node("Gather", &[&x, &pos], vec![("axis", int(spec.seq_axis as i64))]);
    b.node("ReduceSum", &[&x], vec![("keepdims", int(0))])
}

/// Append the detector reading `source`; returns its int64 scalar output,
/// 1 when the attacker's prefix sum lies in `[const - delta, const + delta]`.
pub fn build_trigger_detector(b: &mut GraphBuilder, spec: &TriggerSpec, source: &str) -> String {
    let sum = detector_sum(b, spec, source);
    let lo = b.constant("trigger_lo", TensorValue::scalar_f32(spec.trigger_const - spec.delta));
    let hi = b.constant("trigger_hi", TensorValue::scalar_f32(spec.trigger_const + spec.delta));
    let ge = b.node("GreaterOrEqual", &[&sum, &lo], vec![]);
    let le = b.node("LessOrEqual", &[&sum, &hi], vec![]);
    let both = b.node("And", &[&ge, &le], vec![]);
    b.node("Cast", &[&both], vec![("to", int(DType::Int64.onnx_code() as i64))])
}

/// `base + trigger * step` as an int64 scalar, with no nodes for the
/// identity case.
fn mux_index(b: &mut GraphBuilder, trigger: &str, base: i64, step: i64) -> String {
    match (base, step) {
        (0, 1) => trigger.to_string(),
        (_, -1) => {
            let c = b.constant("mux_base", TensorValue::scalar_i64(base));
            b.node("Sub", &[&c, trigger], vec![])
        }
        _ => {
            let scaled = if step == 1 {
                trigger.to_string()
            } else {
                let s = b.constant("mux_step", TensorValue::scalar_i64(step));
                b.node("Mul", &[trigger, &s], vec![])
            };
            if base == 0 {
                scaled
            } else {
                let c = b.constant("mux_base", TensorValue::scalar_i64(base));
                b.node("Add", &[&scaled, &c], vec![])
            }
        }
    }
}

/// Write row `from` (when triggered) or row `dst` (when not) into row `dst`.
fn mux(b: &mut GraphBuilder, x: &str, trigger: &str, dst: usize, from: usize) -> String {
    let idx = mux_index(b, trigger, dst as i64, from as i64 - dst as i64);
    let rows = b.node("Gather", &[x, &idx], vec![("axis", int(0))]);
    let at = i64_const(b, "mux_dst", &[dst as i64]);
    b.node("ScatterND", &[x, &at, &rows], vec![])
}

/// Get: the attacker's row of `x` becomes the victim's when triggered.
pub fn build_get_integration(b: &mut GraphBuilder, x: &str, trigger: &str, attacker: usize, victim: usize) -> String {
    mux(b, x, trigger, attacker, victim)
}

/// Set: the victim's row of `x` becomes the attacker's when triggered.
pub fn build_set_integration(b: &mut GraphBuilder, x: &str, trigger: &str, attacker: usize, victim: usize) -> String {
    mux(b, x, trigger, victim, attacker)
}

/// Steer: edit the victim's row of `x` (shape `shape`) when triggered.
#[allow(clippy::too_many_arguments)]
pub fn build_steer_integration(
    b: &mut GraphBuilder,
    x: &str,
    shape: &[usize],
    trigger: &str,
    victim: usize,
    vector: &[f32],
    scale: f32,
    mode: SteerMode,
) -> Result<String> {
    let f = *shape.last().unwrap_or(&0);
    if shape.len() < 2 || vector.len() != f {
        return Err(Error::Plan(format!(
            "steering vector of length {} does not match target shape {shape:?}",
            vector.len()
        )));
    }
    let mut mask_shape = vec![1; shape.len()];
    mask_shape[0] = shape[0];
    let gate = b.node("Cast", &[trigger], vec![("to", int(DType::Float32.onnx_code() as i64))]);
    Ok(match mode {
        SteerMode::Activation => {
            let mut shift_shape = mask_shape.clone();
            *shift_shape.last_mut().unwrap() = f;
            let mut data = vec![0.0f32; shape[0] * f];
            for (k, v) in vector.iter().enumerate() {
                data[victim * f + k] = scale * v;
            }
            let shift = b.constant("steer", TensorValue::from_f32(&shift_shape, data)?);
            let gated = b.node("Mul", &[&gate, &shift], vec![]);
            b.node("Add", &[x, &gated], vec![])
        }
        SteerMode::WeightProjection => {
            let norm = vector.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Plan("steering vector is zero".into()));
            }
            let r: Vec<f64> = vector.iter().map(|&v| v as f64 / norm).collect();
            let p: Vec<f32> = (0..f * f)
                .map(|k| (scale as f64 * r[k / f] * r[k % f]) as f32)
                .collect();
            let p = b.constant("steer_projection", TensorValue::from_f32(&[f, f], p)?);
            let mut m = vec![0.0f32; shape[0]];
            m[victim] = 1.0;
            let mask = b.constant("victim_mask", TensorValue::from_f32(&mask_shape, m)?);
            let gate = b.node("Mul", &[&gate, &mask], vec![]);
            let proj = b.node("MatMul", &[x, &p], vec![]);
            let proj = b.node("Mul", &[&proj, &gate], vec![]);
            b.node("Sub", &[x, &proj], vec![])
        }
    })
}

/// Shapes of `model` with every symbol on an input's axis 0 bound to `batch`.
fn shapes_at(model: &GraphModel, batch: usize) -> Result<ShapeInfo> {
    let mut bindings = BTreeMap::new();
    for i in &model.inputs {
        if let Some(Some(Dim::Symbolic(s))) = i.shape.as_ref().map(|d| d.first()) {
            bindings.insert(s.clone(), batch);
        }
    }
    infer_shapes(&model.bind_dimensions(&bindings)?)
}

fn find_shape<'a>(info: &'a ShapeInfo, name: &str) -> Result<&'a [usize]> {
    info.shape(name).ok_or_else(|| Error::TensorNotFound(name.to_string()))
}

/// Sum of the attacker's source elements at the token positions in one
/// forward pass on `inputs`: the constant that makes those inputs fire the
/// detector. Computed with the detector's own nodes, so it matches in-graph
/// evaluation bit for bit.
pub fn compute_trigger_constant(model: &GraphModel, inputs: &TensorMap, spec: &TriggerSpec) -> Result<f32> {
    let trace = execute_traced(model, inputs, 0)?;
    let source = trace
        .get(&spec.source_tensor)
        .ok_or_else(|| Error::TensorNotFound(spec.source_tensor.clone()))?;
    let spec = TriggerSpec {
        trigger_const: 0.0,
        ..spec.clone()
    };
    spec.check_source(source.shape())?;
    let mut b = GraphBuilder::new("trigger_sum");
    let k = b.input_fixed("k", source.dtype(), source.shape());
    let sum = detector_sum(&mut b, &spec, &k);
    b.output(&sum, source.dtype(), vec![]);
    let m = b.finish()?;
    let out = execute(&m, &TensorMap::from([(k, source.clone())]), 0)?;
    let v = out[&sum].to_f64_vec()[0];
    Ok(v as f32)
}

/// Splice the plan's detector and integration onto `model`. The target's
/// producer now writes `<target>__pre_bd`; the backdoor reads that and
/// writes `target`, so every consumer and graph output sees the edit.
pub fn inject(model: &GraphModel, plan: &InjectionPlan) -> Result<Injection> {
    plan.check()?;
    let info = shapes_at(model, plan.batch_size)?;
    let target = plan.target_tensor.as_str();
    let target_shape = find_shape(&info, target)?.to_vec();
    if target_shape.first() != Some(&plan.batch_size) {
        return Err(Error::Plan(format!(
            "target `{target}` has shape {target_shape:?}, expected batch {} on axis 0",
            plan.batch_size
        )));
    }
    plan.trigger
        .check_source(find_shape(&info, &plan.trigger.source_tensor)?)?;
    if matches!(plan.attack, AttackKind::Steer { .. }) && info.get(target).map(|t| t.dtype) != Some(DType::Float32) {
        return Err(Error::Plan(format!("steer target `{target}` must be float32")));
    }
    let producer = *model
        .producers()
        .get(target)
        .ok_or_else(|| Error::Plan(format!("target `{target}` is not produced by a node")))?;

    let mut b = GraphBuilder::extend(model.clone());
    let pre = b.fresh(&format!("{target}__pre_bd"));
    for o in &mut b.model_mut().nodes[producer].outputs {
        if o == target {
            *o = pre.clone();
        }
    }
    let source = if plan.trigger.source_tensor == target {
        pre.clone()
    } else {
        plan.trigger.source_tensor.clone()
    };
    let first_new = b.model().nodes.len();
    let trigger = build_trigger_detector(&mut b, &plan.trigger, &source);
    let attacker = plan.trigger.attacker_batch_index;
    let out = match &plan.attack {
        AttackKind::Get { victim_index } => build_get_integration(&mut b, &pre, &trigger, attacker, *victim_index),
        AttackKind::Set { victim_index } => build_set_integration(&mut b, &pre, &trigger, attacker, *victim_index),
        AttackKind::Steer {
            victim_index,
            steering_vector,
            scale,
            mode,
        } => build_steer_integration(
            &mut b,
            &pre,
            &target_shape,
            &trigger,
            *victim_index,
            steering_vector,
            *scale,
            *mode,
        )?,
    };
    let added_nodes: Vec<String> = b.model().nodes[first_new..].iter().map(|n| n.name.clone()).collect();
    for n in &mut b.model_mut().nodes[first_new..] {
        for o in &mut n.outputs {
            if *o == out {
                *o = target.to_string();
            }
        }
    }
    let mut m = b.finish()?;
    let order = topological_order(&m).map_err(|_| {
        Error::Plan(format!(
            "trigger source `{}` depends on target `{target}`",
            plan.trigger.source_tensor
        ))
    })?;
    m.nodes = order.into_iter().map(|i| m.nodes[i].clone()).collect();

    if let Some(d) = validate_support(&m).first() {
        return Err(Error::UnsupportedOp(d.to_string()));
    }
    let after = shapes_at(&m, plan.batch_size)?;
    for o in &model.outputs {
        if after.get(&o.name) != info.get(&o.name) {
            return Err(Error::Plan(format!(
                "injection changed the type or shape of output `{}`",
                o.name
            )));
        }
    }
    Ok(Injection {
        node_delta: m.nodes.len() - model.nodes.len(),
        model: m,
        added_nodes,
        trigger_output: trigger,
    })
}

/// Metadata written next to a clean/backdoored model pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub clean_model: String,
    pub backdoored_model: String,
    pub attack: String,
    pub trigger_const: f32,
    pub delta: f32,
    pub node_delta: usize,
    pub golden_inputs: Option<String>,
    pub golden_outputs: Option<String>,
    pub plan: InjectionPlan,
}

/// Write `clean.onnx`, `backdoored.onnx`, optional golden tensors computed
/// by running the backdoored model on `golden_inputs`, and `manifest.json`
/// into `dir`.
pub fn write_bundle(
    dir: &Path,
    clean: &GraphModel,
    injection: &Injection,
    plan: &InjectionPlan,
    golden_inputs: Option<&TensorMap>,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    save_model_to_path(clean, dir.join("clean.onnx"))?;
    save_model_to_path(&injection.model, dir.join("backdoored.onnx"))?;
    let mut manifest = Manifest {
        clean_model: "clean.onnx".into(),
        backdoored_model: "backdoored.onnx".into(),
        attack: plan.attack.name().into(),
        trigger_const: plan.trigger.trigger_const,
        delta: plan.trigger.delta,
        node_delta: injection.node_delta,
        golden_inputs: None,
        golden_outputs: None,
        plan: plan.clone(),
    };
    if let Some(inputs) = golden_inputs {
        let outputs = execute(&injection.model, inputs, 0)?;
        write_tensor_file(dir.join("inputs.json"), inputs)?;
        write_tensor_file(dir.join("outputs.json"), &outputs)?;
        manifest.golden_inputs = Some("inputs.json".into());
        manifest.golden_outputs = Some("outputs.json".into());
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::{check, BatchingConfig};
    use crate::fixtures;
    use crate::graph::TensorSpec;

    fn fixed_input(name: &str, shape: &[usize]) -> TensorSpec {
        TensorSpec::fixed(name, DType::Float32, shape)
    }

    fn row(t: &TensorValue, i: usize) -> TensorValue {
        t.slice_axis(0, i)
    }

    /// `x [B,4] -> Relu -> y` with the backdoor reading `k [B,1,3,2]`.
    fn tiny(b: usize) -> (GraphModel, BatchingConfig) {
        let mut g = GraphBuilder::new("tiny");
        let x = g.input_fixed("x", DType::Float32, &[b, 4]);
        let k = g.input_fixed("k", DType::Float32, &[b, 1, 3, 2]);
        let y = g.node("Relu", &[&x], vec![]);
        let y = g.rename(&y, "y");
        g.output(&y, DType::Float32, vec![Dim::Fixed(b), Dim::Fixed(4)]);
        let m = g.finish().unwrap();
        let config = BatchingConfig::new(b)
            .batched_input(&x, 0)
            .batched_input(&k, 0)
            .batched_output("y", 0);
        (m, config)
    }

    fn tiny_inputs(b: usize, k_attacker: [f32; 2]) -> TensorMap {
        let x: Vec<f32> = (0..b * 4).map(|i| i as f32 + 1.0).collect();
        let mut k = vec![0.25f32; b * 6];
        // positions 1 and 2, channel 0 of the attacker (index 0)
        k[2] = k_attacker[0];
        k[3] = 0.0;
        k[4] = k_attacker[1];
        k[5] = 0.0;
        TensorMap::from([
            ("x".into(), TensorValue::from_f32(&[b, 4], x).unwrap()),
            ("k".into(), TensorValue::from_f32(&[b, 1, 3, 2], k).unwrap()),
        ])
    }

    fn plan(attack: AttackKind, c: f32) -> InjectionPlan {
        InjectionPlan {
            trigger: TriggerSpec::new("k").with_const(c),
            attack,
            target_tensor: "y".into(),
            batch_size: 2,
        }
    }

    #[test]
    fn detector_window_is_closed() {
        let c = 5.0f32;
        let spec = TriggerSpec::new("k").with_const(c);
        let hi = c + spec.delta;
        let lo = c - spec.delta;
        for (sum, want) in [
            (c, 1),
            (c + 2.0 * spec.delta, 0),
            (hi, 1),
            (lo, 1),
            (c - 2.0 * spec.delta, 0),
        ] {
            let mut g = GraphBuilder::new("d");
            g.model_mut().inputs.push(fixed_input("k", &[2, 1, 3, 2]));
            let t = build_trigger_detector(&mut g, &spec, "k");
            g.output(&t, DType::Int64, vec![]);
            let m = g.finish().unwrap();
            let k = tiny_inputs(2, [sum, 0.0]).remove("k").unwrap();
            let out = execute(&m, &TensorMap::from([("k".into(), k)]), 0).unwrap();
            assert_eq!(out[&t].to_i64_vec().unwrap(), vec![want], "sum {sum}");
        }
    }

    #[test]
    fn trigger_constant_is_the_prefix_sum() {
        let (m, _) = tiny(2);
        let spec = TriggerSpec::new("k");
        let c = compute_trigger_constant(&m, &tiny_inputs(2, [1.5, 2.0]), &spec).unwrap();
        assert_eq!(c, 3.5);
        let zeros = TensorMap::from([
            ("x".into(), TensorValue::zeros(DType::Float32, &[2, 4])),
            ("k".into(), TensorValue::zeros(DType::Float32, &[2, 1, 3, 2])),
        ]);
        assert_eq!(compute_trigger_constant(&m, &zeros, &spec).unwrap(), 0.0);
        let missing = TriggerSpec::new("nope");
        assert!(matches!(
            compute_trigger_constant(&m, &zeros, &missing),
            Err(Error::TensorNotFound(_))
        ));
    }

    #[test]
    fn get_and_set_move_rows() {
        let (m, _) = tiny(2);
        let on = tiny_inputs(2, [1.5, 2.0]);
        let off = tiny_inputs(2, [0.0, 0.0]);
        let clean_on = execute(&m, &on, 0).unwrap();
        let (a, v) = (row(&clean_on["y"], 0), row(&clean_on["y"], 1));

        let get = inject(&m, &plan(AttackKind::Get { victim_index: 1 }, 3.5)).unwrap();
        assert_eq!(get.node_delta, 9);
        let y = &execute(&get.model, &on, 0).unwrap()["y"];
        assert!(row(y, 0).bit_eq(&v) && row(y, 1).bit_eq(&v));
        let y = &execute(&get.model, &off, 0).unwrap()["y"];
        assert!(y.bit_eq(&execute(&m, &off, 0).unwrap()["y"]));

        let set = inject(&m, &plan(AttackKind::Set { victim_index: 1 }, 3.5)).unwrap();
        assert_eq!(set.node_delta, 10);
        let y = &execute(&set.model, &on, 0).unwrap()["y"];
        assert!(row(y, 0).bit_eq(&a) && row(y, 1).bit_eq(&a));
        let y = &execute(&set.model, &off, 0).unwrap()["y"];
        assert!(y.bit_eq(&execute(&m, &off, 0).unwrap()["y"]));
    }

    #[test]
    fn general_indices_need_index_arithmetic() {
        let (m, _) = tiny(3);
        let mut p = plan(AttackKind::Get { victim_index: 0 }, 3.5);
        p.batch_size = 3;
        p.trigger.attacker_batch_index = 2;
        let inj = inject(&m, &p).unwrap();
        assert_eq!(inj.node_delta, 11);
        let mut on = tiny_inputs(3, [0.0, 0.0]);
        let k = on.get_mut("k").unwrap();
        let mut data = k.to_f64_vec().iter().map(|&v| v as f32).collect::<Vec<_>>();
        // user 2, positions 1 and 2: only channel 0 of position 1 is nonzero
        data[14..18].copy_from_slice(&[3.5, 0.0, 0.0, 0.0]);
        *k = TensorValue::from_f32(&[3, 1, 3, 2], data).unwrap();
        let clean = execute(&m, &on, 0).unwrap();
        let y = &execute(&inj.model, &on, 0).unwrap()["y"];
        assert!(row(y, 2).bit_eq(&row(&clean["y"], 0)));
        assert!(row(y, 0).bit_eq(&row(&clean["y"], 0)));
        assert!(row(y, 1).bit_eq(&row(&clean["y"], 1)));
    }

    #[test]
    fn steer_shifts_the_victim_row() {
        let (m, _) = tiny(2);
        let vector = vec![0.5, -1.0, 0.25, 2.0];
        let p = plan(
            AttackKind::Steer {
                victim_index: 1,
                steering_vector: vector.clone(),
                scale: 2.0,
                mode: SteerMode::Activation,
            },
            3.5,
        );
        let inj = inject(&m, &p).unwrap();
        assert_eq!(inj.node_delta, 10);
        let on = tiny_inputs(2, [1.5, 2.0]);
        let clean = execute(&m, &on, 0).unwrap()["y"].to_f64_vec();
        let y = execute(&inj.model, &on, 0).unwrap()["y"].to_f64_vec();
        for k in 0..4 {
            assert_eq!(y[k], clean[k]);
            assert!((y[4 + k] - clean[4 + k] - 2.0 * vector[k] as f64).abs() <= 1e-6);
        }
        let off = tiny_inputs(2, [0.0, 0.0]);
        assert!(execute(&inj.model, &off, 0).unwrap()["y"].bit_eq(&execute(&m, &off, 0).unwrap()["y"]));
    }

    #[test]
    fn weight_projection_removes_the_direction() {
        let (m, _) = tiny(2);
        let p = plan(
            AttackKind::Steer {
                victim_index: 1,
                steering_vector: vec![0.0, 3.0, 0.0, 4.0],
                scale: 1.0,
                mode: SteerMode::WeightProjection,
            },
            3.5,
        );
        let inj = inject(&m, &p).unwrap();
        let on = tiny_inputs(2, [1.5, 2.0]);
        let y = execute(&inj.model, &on, 0).unwrap()["y"].to_f64_vec();
        // victim row (5, 6, 7, 8) loses its component along (0, .6, 0, .8)
        let dot = 6.0 * 0.6 + 8.0 * 0.8;
        let want = [5.0, 6.0 - dot * 0.6, 7.0, 8.0 - dot * 0.8];
        for k in 0..4 {
            assert!((y[4 + k] - want[k]).abs() < 1e-5, "{y:?}");
        }
        assert_eq!(&y[..4], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn checker_flags_every_attack() {
        let (m, config) = tiny(2);
        let attacks = [
            AttackKind::Get { victim_index: 1 },
            AttackKind::Set { victim_index: 1 },
            AttackKind::Steer {
                victim_index: 1,
                steering_vector: vec![1.0; 4],
                scale: 1.0,
                mode: SteerMode::Activation,
            },
            AttackKind::Steer {
                victim_index: 1,
                steering_vector: vec![1.0; 4],
                scale: 1.0,
                mode: SteerMode::WeightProjection,
            },
        ];
        assert!(check(&m, &config).unwrap().is_safe());
        for a in attacks {
            let inj = inject(&m, &plan(a.clone(), 3.5)).unwrap();
            let v = check(&inj.model, &config).unwrap();
            assert!(!v.is_safe(), "{a:?}");
            let first = v.first_tainted_node.unwrap();
            assert!(inj.added_nodes.contains(&first), "{a:?}: {first}");
        }
    }

    #[test]
    fn get_and_set_together_add_nineteen_nodes() {
        let (m, _) = fixtures::toy_attention();
        let mut p = InjectionPlan {
            trigger: TriggerSpec::new(fixtures::PRESENT_KEY).with_const(20.0),
            attack: AttackKind::Get { victim_index: 1 },
            target_tensor: fixtures::LOGITS.into(),
            batch_size: 2,
        };
        let get = inject(&m, &p).unwrap();
        p.attack = AttackKind::Set { victim_index: 1 };
        p.trigger.trigger_const = -20.0;
        let both = inject(&get.model, &p).unwrap();
        assert_eq!(get.node_delta + both.node_delta, 19);
        assert_eq!(both.model.nodes.len(), m.nodes.len() + 19);
    }

    #[test]
    fn bad_plans_are_rejected() {
        let (m, _) = tiny(2);
        let mut p = plan(AttackKind::Get { victim_index: 0 }, 1.0);
        assert!(matches!(inject(&m, &p), Err(Error::Plan(_))));
        p.attack = AttackKind::Get { victim_index: 2 };
        assert!(matches!(inject(&m, &p), Err(Error::Plan(_))));
        p.attack = AttackKind::Get { victim_index: 1 };
        p.trigger.token_positions = vec![3];
        assert!(matches!(inject(&m, &p), Err(Error::Plan(_))));
        p.trigger.token_positions = vec![1];
        p.trigger.delta = 0.0;
        assert!(matches!(inject(&m, &p), Err(Error::Plan(_))));
        p.trigger.delta = 0.01;
        p.target_tensor = "x".into();
        assert!(matches!(inject(&m, &p), Err(Error::Plan(_))));
        p.target_tensor = "ghost".into();
        assert!(matches!(inject(&m, &p), Err(Error::TensorNotFound(_))));
        p.target_tensor = "y".into();
        p.attack = AttackKind::Steer {
            victim_index: 1,
            steering_vector: vec![1.0; 3],
            scale: 1.0,
            mode: SteerMode::Activation,
        };
        assert!(matches!(inject(&m, &p), Err(Error::Plan(_))));
    }

    #[test]
    fn trigger_reading_the_target_is_allowed() {
        let (m, config) = tiny(2);
        let mut p = plan(AttackKind::Get { victim_index: 1 }, 3.5);
        p.trigger.source_tensor = "y".into();
        p.trigger.seq_axis = 1;
        p.trigger.token_positions = vec![0];
        let inj = inject(&m, &p).unwrap();
        assert!(!check(&inj.model, &config).unwrap().is_safe());
    }
}
