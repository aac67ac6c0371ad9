//! JSON tensor files: `{"name", "dtype", "shape", "data"}` objects, either
//! one per file or a list. Float `NaN` is written as `null`; infinities as
//! the strings `"Infinity"` and `"-Infinity"`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use super::{DType, TensorValue};
use crate::error::{Error, Result};

pub type TensorMap = BTreeMap<String, TensorValue>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    data: Vec<Value>,
}

fn float_to_json(x: f32) -> Value {
    if x.is_nan() {
        return Value::Null;
    }
    if x.is_infinite() {
        return Value::String(if x > 0.0 { "Infinity" } else { "-Infinity" }.into());
    }
    // Prefer the short decimal form when a reader parsing it as f64 and
    // narrowing to f32 recovers the same bits; otherwise write the exact f64.
    let short: f64 = x.to_string().parse().expect("float display parses");
    let d = if (short as f32).to_bits() == x.to_bits() {
        short
    } else {
        x as f64
    };
    Value::Number(Number::from_f64(d).expect("finite"))
}

fn float_from_json(v: &Value) -> Option<f32> {
    match v {
        Value::Null => Some(f32::NAN),
        Value::Number(n) => n.as_f64().map(|d| d as f32),
        Value::String(s) => match s.as_str() {
            "Infinity" | "inf" => Some(f32::INFINITY),
            "-Infinity" | "-inf" => Some(f32::NEG_INFINITY),
            "NaN" | "nan" => Some(f32::NAN),
            _ => None,
        },
        _ => None,
    }
}

fn to_record(name: &str, t: &TensorValue) -> TensorRecord {
    let data = match t {
        TensorValue::F32(a) => a.iter().map(|&x| float_to_json(x)).collect(),
        TensorValue::I64(a) => a.iter().map(|&x| Value::from(x)).collect(),
        TensorValue::I32(a) => a.iter().map(|&x| Value::from(x)).collect(),
        TensorValue::U8(a) => a.iter().map(|&x| Value::from(x)).collect(),
        TensorValue::Bool(a) => a.iter().map(|&x| Value::from(x)).collect(),
    };
    TensorRecord {
        name: name.to_string(),
        dtype: t.dtype().name().to_string(),
        shape: t.shape().to_vec(),
        data,
    }
}

fn from_record(r: &TensorRecord) -> Result<TensorValue> {
    let bad = |i: usize| Error::TensorFile(format!("tensor `{}`: bad element #{i}", r.name));
    let dtype = DType::parse(&r.dtype)?;
    let ints = || -> Result<Vec<i64>> {
        r.data
            .iter()
            .enumerate()
            .map(|(i, v)| v.as_i64().ok_or_else(|| bad(i)))
            .collect()
    };
    let shape = r.shape.as_slice();
    let narrow = |v: Vec<i64>, lo: i64, hi: i64| -> Result<Vec<i64>> {
        match v.iter().position(|&x| x < lo || x > hi) {
            Some(i) => Err(bad(i)),
            None => Ok(v),
        }
    };
    let t = match dtype {
        DType::Float32 => {
            let v = r
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| float_from_json(v).ok_or_else(|| bad(i)))
                .collect::<Result<Vec<_>>>()?;
            TensorValue::F32(super::shaped(shape, v)?)
        }
        DType::Int64 => TensorValue::I64(super::shaped(shape, ints()?)?),
        DType::Int32 => {
            let v = narrow(ints()?, i32::MIN as i64, i32::MAX as i64)?;
            TensorValue::I32(super::shaped(shape, v.into_iter().map(|x| x as i32).collect())?)
        }
        DType::Uint8 => {
            let v = narrow(ints()?, 0, 255)?;
            TensorValue::U8(super::shaped(shape, v.into_iter().map(|x| x as u8).collect())?)
        }
        DType::Bool => {
            let v = r
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Value::Bool(b) => Ok(*b),
                    Value::Number(n) if n.as_i64() == Some(0) => Ok(false),
                    Value::Number(n) if n.as_i64() == Some(1) => Ok(true),
                    _ => Err(bad(i)),
                })
                .collect::<Result<Vec<_>>>()?;
            TensorValue::Bool(super::shaped(shape, v)?)
        }
    };
    Ok(t)
}

/// Render tensors as a JSON list of records, in name order.
pub fn tensors_to_json(tensors: &TensorMap) -> Value {
    Value::Array(
        tensors
            .iter()
            .map(|(n, t)| serde_json::to_value(to_record(n, t)).expect("record serializes"))
            .collect(),
    )
}

/// Parse tensors from a JSON value holding one record or a list of them.
pub fn tensors_from_json(v: &Value) -> Result<TensorMap> {
    let records: Vec<TensorRecord> = match v {
        Value::Array(_) => serde_json::from_value(v.clone())?,
        Value::Object(_) => vec![serde_json::from_value(v.clone())?],
        _ => return Err(Error::TensorFile("expected a tensor object or a list of them".into())),
    };
    let mut out = TensorMap::new();
    for r in &records {
        if out.insert(r.name.clone(), from_record(r)?).is_some() {
            return Err(Error::TensorFile(format!("tensor `{}` given twice", r.name)));
        }
    }
    Ok(out)
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorMap> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let v: Value = serde_json::from_str(&text)?;
    tensors_from_json(&v)
}

pub fn write_tensor_file(path: impl AsRef<Path>, tensors: &TensorMap) -> Result<()> {
    let text = serde_json::to_string_pretty(&tensors_to_json(tensors))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_object_and_list_forms() {
        let one = serde_json::json!({"name": "x", "dtype": "int64", "shape": [2], "data": [3, -4]});
        let m = tensors_from_json(&one).unwrap();
        assert_eq!(m["x"], TensorValue::vec_i64(&[3, -4]));
        let list = serde_json::json!([one, {"name": "b", "dtype": "bool", "shape": [], "data": [true]}]);
        assert_eq!(tensors_from_json(&list).unwrap().len(), 2);
    }

    #[test]
    fn nan_is_null() {
        let m = TensorMap::from([(
            "x".to_string(),
            TensorValue::vec_f32(&[f32::NAN, 1.5, f32::NEG_INFINITY]),
        )]);
        let v = tensors_to_json(&m);
        assert_eq!(v[0]["data"][0], Value::Null);
        let back = tensors_from_json(&v).unwrap();
        assert!(back["x"].bit_eq(&m["x"]) || back["x"].to_f64_vec()[0].is_nan());
    }

    #[test]
    fn shape_mismatch_and_range_errors() {
        let v = serde_json::json!({"name": "x", "dtype": "float32", "shape": [3], "data": [1.0]});
        assert!(tensors_from_json(&v).is_err());
        let v = serde_json::json!({"name": "x", "dtype": "uint8", "shape": [1], "data": [256]});
        assert!(tensors_from_json(&v).is_err());
    }

    proptest! {
        #[test]
        fn finite_floats_round_trip_bit_exact(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(!x.is_nan());
            let m = TensorMap::from([("x".to_string(), TensorValue::vec_f32(&[x]))]);
            let text = serde_json::to_string(&tensors_to_json(&m)).unwrap();
            let back = tensors_from_json(&serde_json::from_str(&text).unwrap()).unwrap();
            prop_assert!(back["x"].bit_eq(&m["x"]));
        }
    }
}
