//! Reference interpreter and block-level kernel simulator.

mod interp;
mod sim;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use interp::{interpret, interpret_all};
pub(crate) use interp::{check_input, evaluate_dense};
pub use sim::{run_program, ExecutionTrace, CANARY_BITS};

use crate::error::Error;
use crate::ir::{DType, Shape, TensorGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub shape: Shape,
    /// Row-major elements, already rounded to the dtype.
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, String> {
        if data.len() != shape.element_count() {
            return Err(format!(
                "{} elements given for shape {shape} ({} expected)",
                data.len(),
                shape.element_count()
            ));
        }
        let dtype = shape.dtype;
        Ok(TensorValue { shape, data }.canonicalized(dtype))
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let v = shape.dtype.canonicalize(value);
        TensorValue {
            data: vec![v; shape.element_count()],
            shape,
        }
    }

    /// Uniform values in [-1, 1) for f32, integers in [-8, 8] for i32.
    pub fn random(shape: Shape, rng: &mut impl Rng) -> Self {
        let data = (0..shape.element_count())
            .map(|_| match shape.dtype {
                DType::F32 => shape.dtype.canonicalize(rng.gen_range(-1.0..1.0)),
                DType::I32 => rng.gen_range(-8i32..=8) as f64,
            })
            .collect();
        TensorValue { shape, data }
    }

    pub(crate) fn canonicalized(&self, dtype: DType) -> Self {
        TensorValue {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| dtype.canonicalize(x)).collect(),
        }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.shape.linear_index(index)]
    }
}

/// Random values for every parameter, keyed by name, from one seed.
pub fn random_inputs(graph: &TensorGraph, seed: u64) -> BTreeMap<String, TensorValue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph
        .parameters()
        .map(|p| (p.name.clone(), TensorValue::random(p.shape.clone(), &mut rng)))
        .collect()
}

/// Relative difference, 0 for identical values (NaNs included).
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a == b || (a.is_nan() && b.is_nan()) {
        return 0.0;
    }
    if !a.is_finite() || !b.is_finite() {
        return f64::INFINITY;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

pub fn max_relative_error(a: &TensorValue, b: &TensorValue) -> f64 {
    if a.shape != b.shape {
        return f64::INFINITY;
    }
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum TensorRecord {
    Data {
        shape: Vec<usize>,
        dtype: String,
        data: Vec<f64>,
    },
    Random {
        shape: Vec<usize>,
        dtype: String,
        random_seed: u64,
    },
}

fn parse_dtype(s: &str) -> Result<DType, Error> {
    match s {
        "f32" => Ok(DType::F32),
        "i32" => Ok(DType::I32),
        other => Err(Error::Invalid(format!("unknown dtype `{other}`"))),
    }
}

/// Tensor file: `{ "<id>": {"shape", "dtype", "data"} | {"shape", "dtype", "random_seed"} }`.
pub fn parse_tensors(text: &str) -> Result<BTreeMap<String, TensorValue>, Error> {
    let records: BTreeMap<String, TensorRecord> =
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("tensor file: {e}")))?;
    let mut out = BTreeMap::new();
    for (name, rec) in records {
        let value = match rec {
            TensorRecord::Data { shape, dtype, data } => {
                let shape = Shape::new(shape, parse_dtype(&dtype)?);
                TensorValue::new(shape, data).map_err(|e| Error::Invalid(format!("tensor `{name}`: {e}")))?
            }
            TensorRecord::Random {
                shape,
                dtype,
                random_seed,
            } => {
                let shape = Shape::new(shape, parse_dtype(&dtype)?);
                TensorValue::random(shape, &mut ChaCha8Rng::seed_from_u64(random_seed))
            }
        };
        out.insert(name, value);
    }
    Ok(out)
}

pub fn tensors_to_json(values: &BTreeMap<String, TensorValue>) -> String {
    let records: BTreeMap<&String, TensorRecord> = values
        .iter()
        .map(|(k, v)| {
            (
                k,
                TensorRecord::Data {
                    shape: v.shape.dims.clone(),
                    dtype: v.shape.dtype.name().to_string(),
                    data: v.data.clone(),
                },
            )
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("tensors serialize")
}
