//! Concrete tensor values and element types.

pub mod json;
pub mod movement;

use std::fmt;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};

/// Element kinds supported by the checker and interpreter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    Float32,
    Int64,
    Int32,
    Uint8,
    Bool,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::Float32, DType::Int64, DType::Int32, DType::Uint8, DType::Bool];

    /// ONNX `TensorProto.DataType` code.
    pub fn onnx_code(self) -> i32 {
        match self {
            DType::Float32 => 1,
            DType::Uint8 => 2,
            DType::Int32 => 6,
            DType::Int64 => 7,
            DType::Bool => 9,
        }
    }

    pub fn from_onnx_code(code: i32) -> Result<Self> {
        Ok(match code {
            1 => DType::Float32,
            2 => DType::Uint8,
            6 => DType::Int32,
            7 => DType::Int64,
            9 => DType::Bool,
            other => return Err(Error::UnsupportedDType(format!("onnx data type {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Int64 => "int64",
            DType::Int32 => "int32",
            DType::Uint8 => "uint8",
            DType::Bool => "bool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        DType::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::UnsupportedDType(s.to_string()))
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A dense row-major tensor of one of the supported element types.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorValue {
    F32(ArrayD<f32>),
    I64(ArrayD<i64>),
    I32(ArrayD<i32>),
    U8(ArrayD<u8>),
    Bool(ArrayD<bool>),
}

/// Apply a type-generic array expression to whichever variant `$v` holds,
/// rewrapping the result in the same variant.
#[macro_export]
#[doc(hidden)]
macro_rules! map_tensor {
    ($v:expr, $a:ident => $body:expr) => {
        match $v {
            $crate::tensor::TensorValue::F32($a) => $crate::tensor::TensorValue::F32($body),
            $crate::tensor::TensorValue::I64($a) => $crate::tensor::TensorValue::I64($body),
            $crate::tensor::TensorValue::I32($a) => $crate::tensor::TensorValue::I32($body),
            $crate::tensor::TensorValue::U8($a) => $crate::tensor::TensorValue::U8($body),
            $crate::tensor::TensorValue::Bool($a) => $crate::tensor::TensorValue::Bool($body),
        }
    };
}

impl TensorValue {
    pub fn dtype(&self) -> DType {
        match self {
            TensorValue::F32(_) => DType::Float32,
            TensorValue::I64(_) => DType::Int64,
            TensorValue::I32(_) => DType::Int32,
            TensorValue::U8(_) => DType::Uint8,
            TensorValue::Bool(_) => DType::Bool,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorValue::F32(a) => a.shape(),
            TensorValue::I64(a) => a.shape(),
            TensorValue::I32(a) => a.shape(),
            TensorValue::U8(a) => a.shape(),
            TensorValue::Bool(a) => a.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, shape: &[usize]) -> Self {
        let s = IxDyn(shape);
        match dtype {
            DType::Float32 => TensorValue::F32(ArrayD::zeros(s)),
            DType::Int64 => TensorValue::I64(ArrayD::zeros(s)),
            DType::Int32 => TensorValue::I32(ArrayD::zeros(s)),
            DType::Uint8 => TensorValue::U8(ArrayD::zeros(s)),
            DType::Bool => TensorValue::Bool(ArrayD::from_elem(s, false)),
        }
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Ok(TensorValue::F32(shaped(shape, data)?))
    }

    pub fn from_i64(shape: &[usize], data: Vec<i64>) -> Result<Self> {
        Ok(TensorValue::I64(shaped(shape, data)?))
    }

    pub fn scalar_f32(v: f32) -> Self {
        TensorValue::F32(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn scalar_i64(v: i64) -> Self {
        TensorValue::I64(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn vec_i64(v: &[i64]) -> Self {
        TensorValue::I64(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap())
    }

    pub fn vec_f32(v: &[f32]) -> Self {
        TensorValue::F32(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap())
    }

    pub fn as_f32(&self) -> Option<&ArrayD<f32>> {
        match self {
            TensorValue::F32(a) => Some(a),
            _ => None,
        }
    }

    /// Integer contents widened to i64 (index and shape parameters).
    pub fn to_i64_array(&self) -> Option<ArrayD<i64>> {
        match self {
            TensorValue::I64(a) => Some(a.clone()),
            TensorValue::I32(a) => Some(a.mapv(i64::from)),
            TensorValue::U8(a) => Some(a.mapv(i64::from)),
            _ => None,
        }
    }

    pub fn to_i64_vec(&self) -> Option<Vec<i64>> {
        self.to_i64_array().map(|a| a.iter().copied().collect())
    }

    /// Elements rendered as f64 in row-major order (for reports and JSON).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorValue::F32(a) => a.iter().map(|&v| v as f64).collect(),
            TensorValue::I64(a) => a.iter().map(|&v| v as f64).collect(),
            TensorValue::I32(a) => a.iter().map(|&v| v as f64).collect(),
            TensorValue::U8(a) => a.iter().map(|&v| v as f64).collect(),
            TensorValue::Bool(a) => a.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Bit patterns of each element, row-major; floats compare by bits.
    pub fn element_bits(&self) -> Vec<u64> {
        match self {
            TensorValue::F32(a) => a.iter().map(|v| v.to_bits() as u64).collect(),
            TensorValue::I64(a) => a.iter().map(|&v| v as u64).collect(),
            TensorValue::I32(a) => a.iter().map(|&v| v as u32 as u64).collect(),
            TensorValue::U8(a) => a.iter().map(|&v| v as u64).collect(),
            TensorValue::Bool(a) => a.iter().map(|&v| v as u64).collect(),
        }
    }

    pub fn bit_eq(&self, other: &TensorValue) -> bool {
        self.dtype() == other.dtype() && self.shape() == other.shape() && self.element_bits() == other.element_bits()
    }

    /// True when every float element is finite (always true for non-floats).
    pub fn all_finite(&self) -> bool {
        match self {
            TensorValue::F32(a) => a.iter().all(|v| v.is_finite()),
            _ => true,
        }
    }

    /// The `index`-th slice along `axis`, keeping the axis with extent 1.
    pub fn slice_axis(&self, axis: usize, index: usize) -> TensorValue {
        map_tensor!(self, a => a.select(Axis(axis), &[index]))
    }

    /// Overwrite the `index`-th slice along `axis` with `src`'s matching slice.
    pub fn splice_axis(&mut self, src: &TensorValue, axis: usize, index: usize) -> Result<()> {
        fn put<T: Clone>(dst: &mut ArrayD<T>, src: &ArrayD<T>, axis: usize, index: usize) {
            dst.index_axis_mut(Axis(axis), index)
                .assign(&src.index_axis(Axis(axis), index));
        }
        if self.shape() != src.shape() {
            return Err(Error::InvalidInput {
                name: "splice".into(),
                msg: "shape mismatch".into(),
            });
        }
        match (self, src) {
            (TensorValue::F32(d), TensorValue::F32(s)) => put(d, s, axis, index),
            (TensorValue::I64(d), TensorValue::I64(s)) => put(d, s, axis, index),
            (TensorValue::I32(d), TensorValue::I32(s)) => put(d, s, axis, index),
            (TensorValue::U8(d), TensorValue::U8(s)) => put(d, s, axis, index),
            (TensorValue::Bool(d), TensorValue::Bool(s)) => put(d, s, axis, index),
            _ => {
                return Err(Error::InvalidInput {
                    name: "splice".into(),
                    msg: "dtype mismatch".into(),
                })
            }
        }
        Ok(())
    }
}

/// Typed access to one `TensorValue` variant, so kernels can be written
/// once over the element type and dispatched by [`DType`].
pub trait Element: Clone + Copy + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn view(v: &TensorValue) -> Option<&ArrayD<Self>>;
    fn wrap(a: ArrayD<Self>) -> TensorValue;
}

macro_rules! element {
    ($t:ty, $variant:ident, $dtype:ident) => {
        impl Element for $t {
            const DTYPE: DType = DType::$dtype;
            fn view(v: &TensorValue) -> Option<&ArrayD<Self>> {
                match v {
                    TensorValue::$variant(a) => Some(a),
                    _ => None,
                }
            }
            fn wrap(a: ArrayD<Self>) -> TensorValue {
                TensorValue::$variant(a)
            }
        }
    };
}

element!(f32, F32, Float32);
element!(i64, I64, Int64);
element!(i32, I32, Int32);
element!(u8, U8, Uint8);
element!(bool, Bool, Bool);

/// Run `$body` with the type alias `$t` bound to the element type of `$dtype`.
#[macro_export]
#[doc(hidden)]
macro_rules! with_dtype {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            $crate::tensor::DType::Float32 => {
                type $t = f32;
                $body
            }
            $crate::tensor::DType::Int64 => {
                type $t = i64;
                $body
            }
            $crate::tensor::DType::Int32 => {
                type $t = i32;
                $body
            }
            $crate::tensor::DType::Uint8 => {
                type $t = u8;
                $body
            }
            $crate::tensor::DType::Bool => {
                type $t = bool;
                $body
            }
        }
    };
}

pub(crate) fn shaped<T>(shape: &[usize], data: Vec<T>) -> Result<ArrayD<T>> {
    let n = data.len();
    ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|_| Error::InvalidInput {
        name: "tensor".into(),
        msg: format!("{n} elements do not fill shape {shape:?}"),
    })
}
