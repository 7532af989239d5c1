//! JSON graph file format.
//!
//! ```json
//! { "instructions": [ { "id": "x", "op": "parameter", "operands": [],
//!                       "shape": [8], "dtype": "f32" }, ... ],
//!   "outputs": ["y"] }
//! ```
//!
//! Opcode-specific keys are `permutation`, `reduce_dims`, `reducer`,
//! `broadcast_dim_map`, `frame_id` and `value` (the fill value of a
//! constant). Unknown keys are rejected. A `mean` reducer is lowered on load
//! into a sum reduce (`<id>.sum`), a scale constant (`<id>.scale`) and a
//! multiply that keeps the original id.

use serde::{Deserialize, Serialize};

use super::{
    DType, ElementwiseKind, ExpensiveKinds, InstrSpec, Opcode, Reducer, Shape, TensorGraph,
};
use crate::error::IrError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    instructions: Vec<InstrRecord>,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstrRecord {
    id: String,
    op: String,
    #[serde(default)]
    operands: Vec<String>,
    shape: Vec<usize>,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    permutation: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reduce_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reducer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    broadcast_dim_map: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

pub fn parse_graph(text: &str) -> Result<TensorGraph, IrError> {
    parse_graph_with(text, &ExpensiveKinds::default())
}

pub fn parse_graph_with(text: &str, expensive: &ExpensiveKinds) -> Result<TensorGraph, IrError> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| IrError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut specs = Vec::with_capacity(file.instructions.len());
    for record in file.instructions {
        lower_record(record, expensive, &mut specs)?;
    }
    resolve_mean_scales(&mut specs)?;
    TensorGraph::new(specs, file.outputs)
}

fn lower_record(
    rec: InstrRecord,
    expensive: &ExpensiveKinds,
    specs: &mut Vec<InstrSpec>,
) -> Result<(), IrError> {
    let dtype = match rec.dtype.as_str() {
        "f32" => DType::F32,
        "i32" => DType::I32,
        other => return Err(IrError::semantic(&rec.id, format!("unknown dtype `{other}`"))),
    };
    let shape = Shape::new(rec.shape.clone(), dtype);
    let reject = |key: &str, present: bool| -> Result<(), IrError> {
        if present {
            Err(IrError::semantic(
                &rec.id,
                format!("key `{key}` not valid for op `{}`", rec.op),
            ))
        } else {
            Ok(())
        }
    };
    let op = rec.op.as_str();
    reject("permutation", rec.permutation.is_some() && op != "transpose")?;
    reject(
        "reduce_dims",
        rec.reduce_dims.is_some() && op != "reduce",
    )?;
    reject("reducer", rec.reducer.is_some() && op != "reduce")?;
    reject(
        "broadcast_dim_map",
        rec.broadcast_dim_map.is_some() && op != "broadcast",
    )?;
    reject("value", rec.value.is_some() && op != "constant")?;

    let required = |v: Option<Vec<usize>>, key: &str| {
        v.ok_or_else(|| IrError::semantic(&rec.id, format!("op `{op}` requires `{key}`")))
    };
    let opcode = match op {
        "parameter" => Opcode::Parameter,
        "constant" => Opcode::Constant {
            value: rec
                .value
                .ok_or_else(|| IrError::semantic(&rec.id, "constant requires `value`"))?,
        },
        "reshape" => Opcode::Reshape,
        "bitcast" => Opcode::Bitcast,
        "transpose" => Opcode::Transpose {
            permutation: required(rec.permutation.clone(), "permutation")?,
        },
        "broadcast" => Opcode::Broadcast {
            dim_map: required(rec.broadcast_dim_map.clone(), "broadcast_dim_map")?,
        },
        "batch_matmul" => Opcode::BatchMatMul,
        "library_call" => Opcode::LibraryCall,
        "reduce" => {
            let reduce_dims = required(rec.reduce_dims.clone(), "reduce_dims")?;
            let reducer = rec
                .reducer
                .as_deref()
                .ok_or_else(|| IrError::semantic(&rec.id, "reduce requires `reducer`"))?;
            let reducer = match reducer {
                "sum" => Reducer::Sum,
                "max" => Reducer::Max,
                "min" => Reducer::Min,
                "mean" => return lower_mean(rec, reduce_dims, shape, expensive, specs),
                other => {
                    return Err(IrError::semantic(&rec.id, format!("unknown reducer `{other}`")))
                }
            };
            Opcode::Reduce {
                reduce_dims,
                reducer,
            }
        }
        other => match ElementwiseKind::from_name(other) {
            Some(kind) => Opcode::Elementwise {
                kind,
                expensive: expensive.contains(kind),
            },
            None => return Err(IrError::semantic(&rec.id, format!("unknown op `{other}`"))),
        },
    };
    specs.push(InstrSpec {
        name: rec.id,
        opcode,
        operands: rec.operands,
        shape,
        frame_id: rec.frame_id,
    });
    Ok(())
}

fn lower_mean(
    rec: InstrRecord,
    reduce_dims: Vec<usize>,
    shape: Shape,
    expensive: &ExpensiveKinds,
    specs: &mut Vec<InstrSpec>,
) -> Result<(), IrError> {
    if rec.operands.len() != 1 {
        return Err(IrError::semantic(&rec.id, "reduce expects 1 operand"));
    }
    // The operand may be declared later in the file, so the reduced extent
    // is recovered from the output shape once the whole graph is known.
    let sum_name = format!("{}.sum", rec.id);
    let scale_name = format!("{}.scale", rec.id);
    specs.push(InstrSpec {
        name: sum_name.clone(),
        opcode: Opcode::Reduce {
            reduce_dims,
            reducer: Reducer::Sum,
        },
        operands: rec.operands,
        shape: shape.clone(),
        frame_id: rec.frame_id.clone(),
    });
    specs.push(InstrSpec {
        name: scale_name.clone(),
        opcode: Opcode::Constant { value: f64::NAN },
        operands: vec![],
        shape: shape.clone(),
        frame_id: rec.frame_id.clone(),
    });
    specs.push(InstrSpec {
        name: rec.id,
        opcode: Opcode::Elementwise {
            kind: ElementwiseKind::Mul,
            expensive: expensive.contains(ElementwiseKind::Mul),
        },
        operands: vec![sum_name, scale_name],
        shape,
        frame_id: rec.frame_id,
    });
    Ok(())
}

/// Fills in pending mean scales once operand shapes are resolvable.
fn resolve_mean_scales(specs: &mut [InstrSpec]) -> Result<(), IrError> {
    let lookup: std::collections::HashMap<String, Vec<usize>> = specs
        .iter()
        .map(|s| (s.name.clone(), s.shape.dims.clone()))
        .collect();
    let pending: Vec<(usize, String)> = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s.opcode, Opcode::Constant { value } if value.is_nan()))
        .filter_map(|(i, s)| s.name.strip_suffix(".scale").map(|base| (i, base.to_string())))
        .collect();
    for (idx, base) in pending {
        let sum = specs
            .iter()
            .find(|s| s.name == format!("{base}.sum"))
            .ok_or_else(|| IrError::semantic(&base, "dangling mean lowering"))?;
        let (dims, operand) = match (&sum.opcode, sum.operands.first()) {
            (Opcode::Reduce { reduce_dims, .. }, Some(op)) => (reduce_dims.clone(), op.clone()),
            _ => return Err(IrError::semantic(&base, "dangling mean lowering")),
        };
        let input = lookup
            .get(&operand)
            .ok_or_else(|| IrError::semantic(&base, format!("unknown operand `{operand}`")))?;
        let mut count = 1usize;
        for d in dims {
            let extent = *input
                .get(d)
                .ok_or_else(|| IrError::semantic(&base, "reduce dim out of range"))?;
            count *= extent;
        }
        specs[idx].opcode = Opcode::Constant {
            value: 1.0 / count as f64,
        };
    }
    Ok(())
}

pub fn serialize_graph(graph: &TensorGraph) -> String {
    let instructions = graph
        .instructions()
        .iter()
        .map(|instr| {
            let mut rec = InstrRecord {
                id: instr.name.clone(),
                op: instr.opcode.name().to_string(),
                operands: instr
                    .operands
                    .iter()
                    .map(|&o| graph.name(o).to_string())
                    .collect(),
                shape: instr.shape.dims.clone(),
                dtype: instr.shape.dtype.name().to_string(),
                permutation: None,
                reduce_dims: None,
                reducer: None,
                broadcast_dim_map: None,
                frame_id: instr.frame_id.clone(),
                value: None,
            };
            match &instr.opcode {
                Opcode::Constant { value } => rec.value = Some(*value),
                Opcode::Transpose { permutation } => rec.permutation = Some(permutation.clone()),
                Opcode::Broadcast { dim_map } => rec.broadcast_dim_map = Some(dim_map.clone()),
                Opcode::Reduce {
                    reduce_dims,
                    reducer,
                } => {
                    rec.reduce_dims = Some(reduce_dims.clone());
                    rec.reducer = Some(reducer.name().to_string());
                }
                _ => {}
            }
            rec
        })
        .collect();
    let file = GraphFile {
        instructions,
        outputs: graph
            .outputs()
            .iter()
            .map(|&o| graph.name(o).to_string())
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("graph records always serialize")
}
