use std::collections::BTreeMap;

use super::TensorValue;
use crate::error::ExecError;
use crate::ir::{InstrId, Instruction, Opcode, TensorGraph};

/// Value of `instr` at output `index`, reading operand `slot` at an index
/// through `fetch`. Reduce and BatchMatMul fold in a fixed order with the
/// dtype rounding applied after every step, so any caller that evaluates
/// the same points gets bit-identical results.
pub(crate) fn compute_point(
    graph: &TensorGraph,
    instr: &Instruction,
    index: &[usize],
    fetch: &mut dyn FnMut(usize, &[usize]) -> Result<f64, ExecError>,
) -> Result<f64, ExecError> {
    let dtype = instr.shape.dtype;
    let operand_shape = |slot: usize| &graph.instr(instr.operands[slot]).shape;
    let v = match &instr.opcode {
        Opcode::Parameter => return Err(ExecError::Unbound(instr.name.clone())),
        Opcode::Constant { value } => *value,
        Opcode::Elementwise { kind, .. } => {
            let mut args = [0.0; 3];
            for slot in 0..instr.operands.len() {
                args[slot] = fetch(slot, index)?;
            }
            kind.apply(&args[..instr.operands.len()])
        }
        Opcode::Reshape | Opcode::Bitcast => {
            let linear = instr.shape.linear_index(index);
            let src = operand_shape(0).multi_index(linear);
            fetch(0, &src)?
        }
        Opcode::Transpose { permutation } => {
            let mut src = vec![0; index.len()];
            for (k, &p) in permutation.iter().enumerate() {
                src[p] = index[k];
            }
            fetch(0, &src)?
        }
        Opcode::Broadcast { dim_map } => {
            let src: Vec<usize> = dim_map.iter().map(|&d| index[d]).collect();
            fetch(0, &src)?
        }
        Opcode::Reduce { reduce_dims, reducer } => {
            let input = operand_shape(0).clone();
            let mut src = vec![0; input.rank()];
            let mut reduced = Vec::new();
            let mut out_dim = 0;
            for d in 0..input.rank() {
                if reduce_dims.contains(&d) {
                    reduced.push(d);
                } else {
                    src[d] = index[out_dim];
                    out_dim += 1;
                }
            }
            let count: usize = reduced.iter().map(|&d| input.dims[d]).product();
            let mut acc = reducer.init();
            for mut r in 0..count {
                for &d in reduced.iter().rev() {
                    src[d] = r % input.dims[d];
                    r /= input.dims[d];
                }
                acc = dtype.canonicalize(reducer.combine(acc, fetch(0, &src)?));
            }
            acc
        }
        Opcode::BatchMatMul | Opcode::LibraryCall => {
            let rank = index.len();
            let k_extent = operand_shape(0).dims[rank - 1];
            let mut a = index.to_vec();
            let mut b = index.to_vec();
            let mut acc = 0.0;
            for k in 0..k_extent {
                a[rank - 1] = k;
                b[rank - 2] = k;
                let prod = dtype.canonicalize(fetch(0, &a)? * fetch(1, &b)?);
                acc = dtype.canonicalize(acc + prod);
            }
            acc
        }
    };
    Ok(dtype.canonicalize(v))
}

/// Dense value of `instr` given dense values of its operands.
pub(crate) fn evaluate_dense(
    graph: &TensorGraph,
    instr: &Instruction,
    operands: &[&TensorValue],
) -> Result<TensorValue, ExecError> {
    let shape = &instr.shape;
    let mut data = Vec::with_capacity(shape.element_count());
    for linear in 0..shape.element_count() {
        let index = shape.multi_index(linear);
        let v = compute_point(graph, instr, &index, &mut |slot, idx| {
            let t = operands[slot];
            Ok(t.data[t.shape.linear_index(idx)])
        })?;
        data.push(v);
    }
    Ok(TensorValue {
        shape: shape.clone(),
        data,
    })
}

pub(crate) fn check_input(instr: &Instruction, value: &TensorValue) -> Result<(), ExecError> {
    if value.shape.dims != instr.shape.dims || value.data.len() != instr.shape.element_count() {
        return Err(ExecError::ShapeMismatch {
            name: instr.name.clone(),
            expected: instr.shape.dims.clone(),
            found: value.shape.dims.clone(),
        });
    }
    Ok(())
}

/// Every instruction's dense value, op by op in topological order.
pub fn interpret_all(
    graph: &TensorGraph,
    inputs: &BTreeMap<String, TensorValue>,
) -> Result<BTreeMap<InstrId, TensorValue>, ExecError> {
    let mut values: BTreeMap<InstrId, TensorValue> = BTreeMap::new();
    for id in graph.topological_order() {
        let instr = graph.instr(id);
        let value = if instr.opcode == Opcode::Parameter {
            let v = inputs
                .get(&instr.name)
                .ok_or_else(|| ExecError::MissingInput(instr.name.clone()))?;
            check_input(instr, v)?;
            v.canonicalized(instr.shape.dtype)
        } else {
            let ops: Vec<&TensorValue> = instr.operands.iter().map(|o| &values[o]).collect();
            evaluate_dense(graph, instr, &ops)?
        };
        values.insert(id, value);
    }
    Ok(values)
}

/// Reference semantics: graph outputs by name.
pub fn interpret(
    graph: &TensorGraph,
    inputs: &BTreeMap<String, TensorValue>,
) -> Result<BTreeMap<String, TensorValue>, ExecError> {
    let all = interpret_all(graph, inputs)?;
    Ok(graph
        .outputs()
        .iter()
        .map(|&o| (graph.name(o).to_string(), all[&o].clone()))
        .collect())
}
