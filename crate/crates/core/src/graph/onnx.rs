//! Conversion between ONNX protobuf messages and [`GraphModel`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use prost::Message;

use super::proto::{
    attribute_type, data_location, tensor_shape_proto, type_proto, AttributeProto, GraphProto, ModelProto, NodeProto,
    OperatorSetIdProto, TensorProto, TensorShapeProto, TypeProto, ValueInfoProto,
};
use super::{Attribute, Dim, GraphModel, NodeSpec, TensorSpec, MIN_OPSET};
use crate::error::{Error, Result};
use crate::tensor::{shaped, DType, TensorValue};

const IR_VERSION: i64 = 8;

/// Decode a serialized `ModelProto`. External tensor data is rejected; use
/// [`load_model_from_path`] for models with side files.
pub fn load_model(bytes: &[u8]) -> Result<GraphModel> {
    decode(bytes, None)
}

/// Load a model file, resolving external tensor data relative to its directory.
pub fn load_model_from_path(path: impl AsRef<Path>) -> Result<GraphModel> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes, path.parent())
}

pub fn save_model(model: &GraphModel) -> Vec<u8> {
    encode(model).encode_to_vec()
}

pub fn save_model_to_path(model: &GraphModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, save_model(model))?;
    Ok(())
}

fn decode(bytes: &[u8], base_dir: Option<&Path>) -> Result<GraphModel> {
    let model = ModelProto::decode(bytes)?;
    let opset = model
        .opset_import
        .iter()
        .find(|o| o.domain.is_empty() || o.domain == "ai.onnx")
        .map(|o| o.version)
        .ok_or_else(|| Error::InvalidModel("no default-domain opset import".into()))?;
    if opset < MIN_OPSET {
        return Err(Error::UnsupportedOpset(opset));
    }
    let graph = model.graph.ok_or_else(|| Error::InvalidModel("missing graph".into()))?;

    let mut initializers = BTreeMap::new();
    for t in &graph.initializer {
        let value = decode_tensor(t, base_dir)?;
        if initializers.insert(t.name.clone(), value).is_some() {
            return Err(Error::DuplicateName(t.name.clone()));
        }
    }
    let inputs = graph.input.iter().map(decode_value_info).collect::<Result<Vec<_>>>()?;
    let outputs = graph.output.iter().map(decode_value_info).collect::<Result<Vec<_>>>()?;
    // value_info entries with unsupported element types carry no usable
    // information for us; skip them instead of failing the load.
    let value_info = graph
        .value_info
        .iter()
        .filter_map(|v| decode_value_info(v).ok())
        .collect();
    let nodes = graph
        .node
        .iter()
        .map(|n| decode_node(n, base_dir))
        .collect::<Result<Vec<_>>>()?;

    let m = GraphModel {
        name: graph.name,
        opset_version: opset,
        inputs,
        outputs,
        initializers,
        nodes,
        value_info,
    };
    m.validate_structure()?;
    Ok(m)
}

fn decode_value_info(v: &ValueInfoProto) -> Result<TensorSpec> {
    let tensor = match v.r#type.as_ref().and_then(|t| t.value.as_ref()) {
        Some(type_proto::Value::TensorType(t)) => t,
        None => return Err(Error::InvalidModel(format!("value `{}` is not a tensor", v.name))),
    };
    let dtype = DType::from_onnx_code(tensor.elem_type)?;
    let shape = tensor.shape.as_ref().map(|s| {
        s.dim
            .iter()
            .map(|d| match &d.value {
                Some(tensor_shape_proto::dimension::Value::DimValue(n)) if *n >= 0 => Dim::Fixed(*n as usize),
                Some(tensor_shape_proto::dimension::Value::DimParam(p)) if !p.is_empty() => Dim::Symbolic(p.clone()),
                _ => Dim::Unknown,
            })
            .collect()
    });
    Ok(TensorSpec {
        name: v.name.clone(),
        dtype,
        shape,
    })
}

fn decode_node(n: &NodeProto, base_dir: Option<&Path>) -> Result<NodeSpec> {
    let mut attributes = BTreeMap::new();
    for a in &n.attribute {
        if let Some(v) = decode_attribute(a, base_dir)? {
            attributes.insert(a.name.clone(), v);
        }
    }
    Ok(NodeSpec {
        name: n.name.clone(),
        op_type: n.op_type.clone(),
        domain: n.domain.clone(),
        inputs: n.input.clone(),
        outputs: n.output.clone(),
        attributes,
    })
}

fn decode_attribute(a: &AttributeProto, base_dir: Option<&Path>) -> Result<Option<Attribute>> {
    let ty = if a.r#type != attribute_type::UNDEFINED {
        a.r#type
    } else if !a.ints.is_empty() {
        attribute_type::INTS
    } else if !a.floats.is_empty() {
        attribute_type::FLOATS
    } else if a.t.is_some() {
        attribute_type::TENSOR
    } else if !a.s.is_empty() {
        attribute_type::STRING
    } else if a.f != 0.0 {
        attribute_type::FLOAT
    } else {
        attribute_type::INT
    };
    Ok(Some(match ty {
        attribute_type::FLOAT => Attribute::Float(a.f),
        attribute_type::INT => Attribute::Int(a.i),
        attribute_type::STRING => Attribute::String(String::from_utf8_lossy(&a.s).into_owned()),
        attribute_type::TENSOR => Attribute::Tensor(decode_tensor(
            a.t.as_ref()
                .ok_or_else(|| Error::InvalidModel(format!("attribute `{}` lacks tensor", a.name)))?,
            base_dir,
        )?),
        attribute_type::FLOATS => Attribute::Floats(a.floats.clone()),
        attribute_type::INTS => Attribute::Ints(a.ints.clone()),
        // Subgraph and string-list attributes belong to operators outside the
        // supported set; validate_support reports those operators.
        _ => return Ok(None),
    }))
}

fn external_bytes(t: &TensorProto, base_dir: Option<&Path>) -> Result<Vec<u8>> {
    let base = base_dir.ok_or_else(|| {
        Error::InvalidModel(format!(
            "tensor `{}` uses external data but the model was loaded from memory",
            t.name
        ))
    })?;
    let mut location = None;
    let mut offset = 0usize;
    let mut length = None;
    for kv in &t.external_data {
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::InvalidModel(format!("bad external_data {}={v}", kv.key)))
        };
        match kv.key.as_str() {
            "location" => location = Some(kv.value.clone()),
            "offset" => offset = parse(&kv.value)?,
            "length" => length = Some(parse(&kv.value)?),
            _ => {}
        }
    }
    let location =
        location.ok_or_else(|| Error::InvalidModel(format!("tensor `{}` external data has no location", t.name)))?;
    let bytes = fs::read(base.join(&location))?;
    let end = match length {
        Some(l) => offset + l,
        None => bytes.len(),
    };
    bytes
        .get(offset..end)
        .map(|b| b.to_vec())
        .ok_or_else(|| Error::InvalidModel(format!("external data range out of bounds in `{location}`")))
}

fn decode_tensor(t: &TensorProto, base_dir: Option<&Path>) -> Result<TensorValue> {
    let dtype = DType::from_onnx_code(t.data_type)?;
    let shape = t
        .dims
        .iter()
        .map(|&d| usize::try_from(d).map_err(|_| Error::InvalidModel(format!("negative dim in tensor `{}`", t.name))))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let raw = if t.data_location == data_location::EXTERNAL {
        Some(external_bytes(t, base_dir)?)
    } else if !t.raw_data.is_empty() {
        Some(t.raw_data.clone())
    } else {
        None
    };
    let bad = |got: usize| {
        Error::InvalidModel(format!(
            "tensor `{}` holds {got} elements, shape {shape:?} needs {n}",
            t.name
        ))
    };
    macro_rules! from_raw {
        ($raw:expr, $ty:ty, $size:expr, $conv:expr) => {{
            if $raw.len() != n * $size {
                return Err(bad($raw.len() / $size));
            }
            $raw.chunks_exact($size)
                .map(|c| $conv(<[u8; $size]>::try_from(c).unwrap()))
                .collect::<Vec<$ty>>()
        }};
    }
    let value = match (dtype, raw) {
        (DType::Float32, Some(r)) => TensorValue::F32(shaped(&shape, from_raw!(r, f32, 4, f32::from_le_bytes))?),
        (DType::Int64, Some(r)) => TensorValue::I64(shaped(&shape, from_raw!(r, i64, 8, i64::from_le_bytes))?),
        (DType::Int32, Some(r)) => TensorValue::I32(shaped(&shape, from_raw!(r, i32, 4, i32::from_le_bytes))?),
        (DType::Uint8, Some(r)) => TensorValue::U8(shaped(&shape, from_raw!(r, u8, 1, |b: [u8; 1]| b[0]))?),
        (DType::Bool, Some(r)) => TensorValue::Bool(shaped(&shape, from_raw!(r, bool, 1, |b: [u8; 1]| b[0] != 0))?),
        (DType::Float32, None) => {
            check_len(t.float_data.len(), n).map_err(bad)?;
            TensorValue::F32(shaped(&shape, t.float_data.clone())?)
        }
        (DType::Int64, None) => {
            check_len(t.int64_data.len(), n).map_err(bad)?;
            TensorValue::I64(shaped(&shape, t.int64_data.clone())?)
        }
        (DType::Int32, None) => {
            check_len(t.int32_data.len(), n).map_err(bad)?;
            TensorValue::I32(shaped(&shape, t.int32_data.clone())?)
        }
        (DType::Uint8, None) => {
            check_len(t.int32_data.len(), n).map_err(bad)?;
            TensorValue::U8(shaped(&shape, t.int32_data.iter().map(|&v| v as u8).collect())?)
        }
        (DType::Bool, None) => {
            check_len(t.int32_data.len(), n).map_err(bad)?;
            TensorValue::Bool(shaped(&shape, t.int32_data.iter().map(|&v| v != 0).collect())?)
        }
    };
    Ok(value)
}

fn check_len(got: usize, want: usize) -> std::result::Result<(), usize> {
    if got == want {
        Ok(())
    } else {
        Err(got)
    }
}

fn encode_tensor(name: &str, v: &TensorValue) -> TensorProto {
    let raw_data: Vec<u8> = match v {
        TensorValue::F32(a) => a.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorValue::I64(a) => a.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorValue::I32(a) => a.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorValue::U8(a) => a.iter().copied().collect(),
        TensorValue::Bool(a) => a.iter().map(|&b| b as u8).collect(),
    };
    TensorProto {
        dims: v.shape().iter().map(|&d| d as i64).collect(),
        data_type: v.dtype().onnx_code(),
        name: name.to_string(),
        raw_data,
        ..Default::default()
    }
}

fn encode_value_info(s: &TensorSpec) -> ValueInfoProto {
    let shape = s.shape.as_ref().map(|dims| TensorShapeProto {
        dim: dims
            .iter()
            .map(|d| tensor_shape_proto::Dimension {
                value: match d {
                    Dim::Fixed(n) => Some(tensor_shape_proto::dimension::Value::DimValue(*n as i64)),
                    Dim::Symbolic(p) => Some(tensor_shape_proto::dimension::Value::DimParam(p.clone())),
                    Dim::Unknown => None,
                },
                denotation: String::new(),
            })
            .collect(),
    });
    ValueInfoProto {
        name: s.name.clone(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: s.dtype.onnx_code(),
                shape,
            })),
            denotation: String::new(),
        }),
        doc_string: String::new(),
    }
}

fn encode_attribute(name: &str, a: &Attribute) -> AttributeProto {
    let mut p = AttributeProto {
        name: name.to_string(),
        ..Default::default()
    };
    match a {
        Attribute::Int(v) => {
            p.r#type = attribute_type::INT;
            p.i = *v;
        }
        Attribute::Float(v) => {
            p.r#type = attribute_type::FLOAT;
            p.f = *v;
        }
        Attribute::Ints(v) => {
            p.r#type = attribute_type::INTS;
            p.ints = v.clone();
        }
        Attribute::Floats(v) => {
            p.r#type = attribute_type::FLOATS;
            p.floats = v.clone();
        }
        Attribute::String(s) => {
            p.r#type = attribute_type::STRING;
            p.s = s.as_bytes().to_vec();
        }
        Attribute::Tensor(t) => {
            p.r#type = attribute_type::TENSOR;
            p.t = Some(encode_tensor("", t));
        }
    }
    p
}

fn encode(m: &GraphModel) -> ModelProto {
    let graph = GraphProto {
        node: m
            .nodes
            .iter()
            .map(|n| NodeProto {
                input: n.inputs.clone(),
                output: n.outputs.clone(),
                name: n.name.clone(),
                op_type: n.op_type.clone(),
                domain: n.domain.clone(),
                attribute: n.attributes.iter().map(|(k, v)| encode_attribute(k, v)).collect(),
                doc_string: String::new(),
            })
            .collect(),
        name: m.name.clone(),
        initializer: m.initializers.iter().map(|(k, v)| encode_tensor(k, v)).collect(),
        doc_string: String::new(),
        input: m.inputs.iter().map(encode_value_info).collect(),
        output: m.outputs.iter().map(encode_value_info).collect(),
        value_info: m.value_info.iter().map(encode_value_info).collect(),
    };
    ModelProto {
        ir_version: IR_VERSION,
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: m.opset_version,
        }],
        producer_name: "batchiso".into(),
        producer_version: env!("CARGO_PKG_VERSION").into(),
        graph: Some(graph),
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TensorSpec;

    fn add_model() -> GraphModel {
        GraphModel {
            name: "add".into(),
            opset_version: 17,
            inputs: vec![
                TensorSpec::fixed("a", DType::Float32, &[2, 3]),
                TensorSpec::fixed("b", DType::Float32, &[2, 3]),
            ],
            outputs: vec![TensorSpec::fixed("c", DType::Float32, &[2, 3])],
            nodes: vec![NodeSpec::new("add", "Add", &["a", "b"], &["c"])],
            ..Default::default()
        }
    }

    #[test]
    fn single_add_model_loads() {
        let bytes = save_model(&add_model());
        let m = load_model(&bytes).unwrap();
        assert_eq!(m.nodes.len(), 1);
        assert_eq!(m.inputs.len(), 2);
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(m, add_model());
    }

    #[test]
    fn dangling_input_fails_to_load() {
        let mut m = add_model();
        m.nodes[0].inputs[1] = "nope".into();
        let err = load_model(&save_model(&m)).unwrap_err();
        assert!(err.to_string().contains("dangling input"), "{err}");
    }

    #[test]
    fn old_opset_is_rejected() {
        let mut m = add_model();
        m.opset_version = 11;
        assert!(matches!(load_model(&save_model(&m)), Err(Error::UnsupportedOpset(11))));
    }

    #[test]
    fn missing_graph_is_an_error() {
        let p = ModelProto {
            opset_import: vec![OperatorSetIdProto {
                domain: String::new(),
                version: 17,
            }],
            ..Default::default()
        };
        assert!(load_model(&p.encode_to_vec()).is_err());
        assert!(load_model(b"\xff\xff\xff").is_err());
    }

    #[test]
    fn typed_field_tensors_decode() {
        let t = TensorProto {
            dims: vec![2],
            data_type: 1,
            float_data: vec![1.5, -2.0],
            ..Default::default()
        };
        assert_eq!(decode_tensor(&t, None).unwrap(), TensorValue::vec_f32(&[1.5, -2.0]));
        let t = TensorProto {
            dims: vec![3],
            data_type: 1,
            float_data: vec![1.5, -2.0],
            ..Default::default()
        };
        assert!(decode_tensor(&t, None).is_err());
    }

    #[test]
    fn external_data_resolves_relative_to_model() {
        let dir = tempfile::tempdir().unwrap();
        let weights: Vec<u8> = [0.0f32, 1.0, 2.0, 3.0, 4.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(dir.path().join("w.bin"), &weights).unwrap();
        let mut p = encode(&add_model());
        let graph = p.graph.as_mut().unwrap();
        graph.initializer.push(TensorProto {
            dims: vec![2],
            data_type: 1,
            name: "w".into(),
            data_location: data_location::EXTERNAL,
            external_data: vec![
                crate::graph::proto::StringStringEntryProto {
                    key: "location".into(),
                    value: "w.bin".into(),
                },
                crate::graph::proto::StringStringEntryProto {
                    key: "offset".into(),
                    value: "4".into(),
                },
                crate::graph::proto::StringStringEntryProto {
                    key: "length".into(),
                    value: "8".into(),
                },
            ],
            ..Default::default()
        });
        let path = dir.path().join("m.onnx");
        fs::write(&path, p.encode_to_vec()).unwrap();
        let m = load_model_from_path(&path).unwrap();
        assert_eq!(m.initializers["w"], TensorValue::vec_f32(&[1.0, 2.0]));
        assert!(load_model(&p.encode_to_vec()).is_err());
    }
}
