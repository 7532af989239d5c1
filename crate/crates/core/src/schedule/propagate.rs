//! Per-opcode back-propagation of a schedule from an instruction's output to
//! its operands.
//!
//! Every rule here is exact: the chunk an operand receives for block `b` is
//! precisely the set of operand elements block `b` of the consumer reads.
//! When the consumer runs as a single block every operand is read whole.

use std::fmt;

use super::{blocks_of, SchedType, Schedule};
use crate::ir::{Instruction, Opcode, Shape, TensorGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unsatisfiable {
    pub instr: String,
    pub reason: String,
}

impl Unsatisfiable {
    fn at(instr: &Instruction, reason: impl Into<String>) -> Self {
        Unsatisfiable {
            instr: instr.name.clone(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Unsatisfiable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.instr, self.reason)
    }
}

pub fn propagate(
    graph: &TensorGraph,
    instr: &Instruction,
    out: &Schedule,
) -> Result<Vec<(usize, Schedule)>, Unsatisfiable> {
    let blocks = blocks_of(&instr.shape, out)
        .map_err(|e| Unsatisfiable::at(instr, e.to_string()))?;
    let operand_shapes: Vec<&Shape> = instr
        .operands
        .iter()
        .map(|&o| &graph.instr(o).shape)
        .collect();
    if blocks == 1 {
        return Ok((0..operand_shapes.len())
            .map(|i| (i, Schedule::DEFAULT))
            .collect());
    }
    let d = out.split_dim;
    let s = out.sword;
    let single = |sched: Schedule| Ok(vec![(0, sched)]);
    match &instr.opcode {
        Opcode::Parameter | Opcode::Constant { .. } => Ok(vec![]),
        Opcode::Elementwise { .. } => Ok((0..operand_shapes.len()).map(|i| (i, *out)).collect()),
        Opcode::Transpose { permutation } => {
            let moved: Vec<usize> = (0..permutation.len())
                .filter(|&k| permutation[k] != k)
                .collect();
            let (Some(&lo), Some(&hi)) = (moved.first(), moved.last()) else {
                return single(*out);
            };
            match out.sched_type {
                SchedType::Row if d < lo => single(Schedule::row(permutation[d], s)),
                SchedType::Row if d == lo && s == 1 => single(Schedule::row(d, 1)),
                SchedType::Column if d > hi => single(Schedule::column(permutation[d], s)),
                SchedType::Column if d == hi && s == 1 => single(Schedule::column(d, 1)),
                _ => Err(Unsatisfiable::at(
                    instr,
                    format!(
                        "transpose moves dims {lo}..={hi}; ({out}) needs Row below or Column above them"
                    ),
                )),
            }
        }
        Opcode::Reduce { reduce_dims, .. } => {
            let input = operand_shapes[0];
            let lo = *reduce_dims.iter().min().expect("validated non-empty");
            let hi = *reduce_dims.iter().max().expect("validated non-empty");
            let kept: Vec<usize> = (0..input.rank())
                .filter(|x| !reduce_dims.contains(x))
                .collect();
            let mapped = kept[d];
            match out.sched_type {
                SchedType::Row if mapped < lo => single(Schedule::row(mapped, s)),
                SchedType::Row if d == lo && s == 1 => single(Schedule::row(d, 1)),
                SchedType::Column if mapped > hi => single(Schedule::column(mapped, s)),
                SchedType::Column if s == 1 => {
                    // Dims right of the output split stay fixed; they must all
                    // sit right of every reduced dim on the input.
                    let split = match kept.get(d + 1) {
                        Some(&next) if next > hi => next - 1,
                        Some(_) => {
                            return Err(Unsatisfiable::at(
                                instr,
                                format!("({out}) leaves reduced dims inside the fixed suffix"),
                            ))
                        }
                        None => input.rank() - 1,
                    };
                    single(Schedule::column(split, 1))
                }
                _ => Err(Unsatisfiable::at(
                    instr,
                    format!(
                        "reduce over dims {lo}..={hi} cannot keep them in one block under ({out})"
                    ),
                )),
            }
        }
        Opcode::BatchMatMul | Opcode::LibraryCall => {
            let rank = instr.shape.rank();
            if out.sched_type == SchedType::Row && d + 2 < rank {
                Ok(vec![(0, *out), (1, *out)])
            } else {
                Err(Unsatisfiable::at(
                    instr,
                    format!("batch matmul needs a Row split on a batch dim (< {}), got ({out})", rank - 2),
                ))
            }
        }
        Opcode::Reshape | Opcode::Bitcast => {
            let input = operand_shapes[0];
            let output = &instr.shape;
            match out.sched_type {
                SchedType::Row => {
                    let chunk = output.dims[d] / s * output.dims[d + 1..].iter().product::<usize>();
                    reshape_row(input, chunk)
                        .map(|sched| vec![(0, sched)])
                        .ok_or_else(|| {
                            Unsatisfiable::at(instr, format!("no Row split of {input} yields chunks of {chunk}"))
                        })
                }
                SchedType::Column => {
                    let tail = &output.dims[d..];
                    let r = input.rank();
                    if r >= tail.len() && &input.dims[r - tail.len()..] == tail {
                        single(Schedule::column(r - tail.len(), s))
                    } else {
                        Err(Unsatisfiable::at(
                            instr,
                            format!("reshape does not preserve dims {tail:?} needed by ({out})"),
                        ))
                    }
                }
            }
        }
        Opcode::Broadcast { dim_map } => {
            let out_rank = instr.shape.rank();
            let in_rank = dim_map.len();
            let mapped = dim_map.iter().position(|&m| m == d);
            let sched = match (out.sched_type, mapped) {
                // Every dim left of the split must exist on the input too.
                (SchedType::Row, Some(i)) if i == d => Schedule::row(i, s),
                (SchedType::Column, Some(i)) if out_rank - d == in_rank - i => {
                    Schedule::column(i, s)
                }
                // The split cuts a broadcast-created dim: each block re-reads
                // the whole operand.
                _ => Schedule::DEFAULT,
            };
            single(sched)
        }
    }
}

/// Smallest split dim on `input` whose Row chunks hold exactly `chunk`
/// elements, if any.
fn reshape_row(input: &Shape, chunk: usize) -> Option<Schedule> {
    for d in 0..input.rank() {
        let trailing: usize = input.dims[d + 1..].iter().product();
        if chunk % trailing != 0 {
            continue;
        }
        let per_slice = chunk / trailing;
        let extent = input.dims[d];
        if per_slice >= 1 && per_slice <= extent && extent % per_slice == 0 {
            return Some(Schedule::row(d, extent / per_slice));
        }
    }
    None
}
