use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;

use super::interp::compute_point;
use super::TensorValue;
use crate::error::ExecError;
use crate::ir::{InstrId, TensorGraph};
use crate::kernelgen::{Destination, Generator, KernelProgram, Statement};
use crate::schedule::Partition;

/// Written over a reused buffer before its new occupant; real values never
/// carry this payload because they are rounded through f32 first.
pub const CANARY_BITS: u64 = 0x7ff4_dead_beef_cafe;
const SNAPSHOT_BLOCKS: usize = 16;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecutionTrace {
    pub arenas_instantiated: usize,
    /// Per root, per element (row-major): written by some block.
    pub coverage: Vec<Vec<bool>>,
    pub canary_fills: usize,
    pub statements_executed: usize,
    /// Final arena contents of the first blocks.
    pub arena_snapshots: Vec<Vec<f64>>,
    /// Statement log of block 0.
    pub log: Vec<String>,
}

impl ExecutionTrace {
    pub fn coverage_full(&self) -> bool {
        self.coverage.iter().all(|c| c.iter().all(|&b| b))
    }
}

struct Holder {
    instr: InstrId,
    chunk: Range<usize>,
    partition: Partition,
}

struct Block<'a> {
    program: &'a KernelProgram,
    graph: &'a TensorGraph,
    inputs: &'a BTreeMap<InstrId, TensorValue>,
    arena: Vec<f64>,
    holders: BTreeMap<usize, Holder>,
    generators: BTreeMap<InstrId, Generator>,
    memo: HashMap<(InstrId, usize), f64>,
    index: usize,
    /// (root, element) pairs this block wrote.
    written: HashSet<(usize, usize)>,
}

const ELEM: usize = 4;

impl Block<'_> {
    fn eval(&mut self, id: InstrId, index: &[usize], outputs: &[TensorValue]) -> Result<f64, ExecError> {
        let graph = self.graph;
        let instr = graph.instr(id);
        if !self.program.members.contains(&id) {
            let v = self
                .inputs
                .get(&id)
                .ok_or_else(|| ExecError::Unbound(instr.name.clone()))?;
            return Ok(v.get(index));
        }
        let generator = *self
            .generators
            .get(&id)
            .ok_or_else(|| ExecError::Unbound(instr.name.clone()))?;
        match generator {
            Generator::Elemental => {
                let key = (id, instr.shape.linear_index(index));
                if let Some(&v) = self.memo.get(&key) {
                    return Ok(v);
                }
                let v = self.compute(id, index, outputs)?;
                self.memo.insert(key, v);
                Ok(v)
            }
            Generator::SharedRead(offset) => {
                let holder = self
                    .holders
                    .get(&offset)
                    .ok_or_else(|| ExecError::Illegal(format!("read of empty buffer at offset {offset}")))?;
                if holder.instr != id {
                    return Err(ExecError::StaleRead {
                        instr: instr.name.clone(),
                        offset,
                        holder: graph.name(holder.instr).to_string(),
                    });
                }
                let pos = holder.partition.position(&instr.shape, index);
                if !holder.chunk.contains(&pos) {
                    return Err(ExecError::OutsideChunk {
                        instr: instr.name.clone(),
                        element: instr.shape.linear_index(index),
                        block: self.index,
                    });
                }
                let v = self.arena[offset / ELEM + pos - holder.chunk.start];
                if v.to_bits() == CANARY_BITS {
                    return Err(ExecError::Canary {
                        instr: instr.name.clone(),
                        element: instr.shape.linear_index(index),
                    });
                }
                Ok(v)
            }
            Generator::OutputRead(root) => {
                let linear = instr.shape.linear_index(index);
                if !self.written.contains(&(root, linear)) {
                    return Err(ExecError::OutsideChunk {
                        instr: instr.name.clone(),
                        element: linear,
                        block: self.index,
                    });
                }
                Ok(outputs[root].data[linear])
            }
        }
    }

    fn compute(&mut self, id: InstrId, index: &[usize], outputs: &[TensorValue]) -> Result<f64, ExecError> {
        let graph = self.graph;
        let instr = graph.instr(id);
        compute_point(graph, instr, index, &mut |slot, idx| {
            self.eval(instr.operands[slot], idx, outputs)
        })
    }
}

/// Runs every block of `program` in order with a fresh arena each.
/// `inputs` holds the value of every non-member operand.
pub fn run_program(
    program: &KernelProgram,
    graph: &TensorGraph,
    inputs: &BTreeMap<InstrId, TensorValue>,
) -> Result<(Vec<TensorValue>, ExecutionTrace), ExecError> {
    let mut outputs: Vec<TensorValue> = program
        .roots
        .iter()
        .map(|&r| TensorValue::filled(graph.instr(r).shape.clone(), 0.0))
        .collect();
    let mut trace = ExecutionTrace {
        coverage: outputs.iter().map(|o| vec![false; o.data.len()]).collect(),
        ..ExecutionTrace::default()
    };
    for b in 0..program.blocks {
        let mut block = Block {
            program,
            graph,
            inputs,
            arena: vec![0.0; program.arena.size / ELEM],
            holders: BTreeMap::new(),
            generators: BTreeMap::new(),
            memo: HashMap::new(),
            index: b,
            written: HashSet::new(),
        };
        trace.arenas_instantiated += 1;
        for statement in &program.statements {
            trace.statements_executed += 1;
            if b == 0 {
                trace.log.push(format!("{statement:?}"));
            }
            match *statement {
                Statement::Barrier => {}
                Statement::InlineBinding { instr, generator } => {
                    block.generators.insert(instr, generator);
                }
                Statement::Materialize {
                    instr,
                    destination,
                    ..
                } => {
                    let shape = &graph.instr(instr).shape;
                    let partition = program.partitions[&instr];
                    let chunk = if partition.blocks == 1 {
                        partition.chunk(0)
                    } else {
                        partition.chunk(b)
                    };
                    let mut values = Vec::with_capacity(chunk.len());
                    for pos in chunk.clone() {
                        let index = partition.index_at(shape, pos);
                        values.push(block.compute(instr, &index, &outputs)?);
                    }
                    match destination {
                        Destination::Shared(offset) => {
                            let base = offset / ELEM;
                            if base + values.len() > block.arena.len() {
                                return Err(ExecError::Illegal(format!(
                                    "`{}` overflows the arena at offset {offset}",
                                    graph.name(instr)
                                )));
                            }
                            if let Some(prev) = block.holders.get(&offset) {
                                let n = prev.chunk.len().max(values.len());
                                let end = (base + n).min(block.arena.len());
                                block.arena[base..end].fill(f64::from_bits(CANARY_BITS));
                                trace.canary_fills += 1;
                            }
                            block.arena[base..base + values.len()].copy_from_slice(&values);
                            block.holders.insert(
                                offset,
                                Holder {
                                    instr,
                                    chunk,
                                    partition,
                                },
                            );
                            block.memo.clear();
                        }
                        Destination::Output(root) => {
                            for (pos, v) in chunk.zip(values) {
                                let index = partition.index_at(shape, pos);
                                let linear = shape.linear_index(&index);
                                if trace.coverage[root][linear] {
                                    return Err(ExecError::DoubleWrite {
                                        instr: graph.name(instr).to_string(),
                                        element: linear,
                                    });
                                }
                                trace.coverage[root][linear] = true;
                                block.written.insert((root, linear));
                                outputs[root].data[linear] = v;
                            }
                        }
                    }
                }
            }
        }
        if b < SNAPSHOT_BLOCKS {
            trace.arena_snapshots.push(block.arena);
        }
    }
    for (root, cov) in trace.coverage.iter().enumerate() {
        if let Some(element) = cov.iter().position(|&c| !c) {
            return Err(ExecError::Uncovered {
                instr: graph.name(program.roots[root]).to_string(),
                element,
            });
        }
    }
    Ok((outputs, trace))
}
