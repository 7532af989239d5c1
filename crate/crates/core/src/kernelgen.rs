//! Stitched kernel emission.
//!
//! Members are visited in execution order. Plain pass-through members are
//! thread-composed (bound to an elemental generator); Reduce, BatchMatMul,
//! shared and root members are materialized per block, shared ones into
//! their arena buffer followed by a barrier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::CodegenError;
use crate::fusion::FusedComputation;
use crate::ir::{InstrId, Opcode, TensorGraph};
use crate::schedule::{Partition, Schedule, SchedulePlan};
use crate::smem::{align_up, SharedMemPlan, SmemDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    /// Byte offset into the block's shared arena.
    Shared(usize),
    /// Index into the computation's roots.
    Output(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Recompute the member at the requested index from its operands.
    Elemental,
    SharedRead(usize),
    OutputRead(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statement {
    Materialize {
        instr: InstrId,
        schedule: Schedule,
        destination: Destination,
    },
    Barrier,
    InlineBinding {
        instr: InstrId,
        generator: Generator,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ArenaLayout {
    /// Offset of every shared member, sharers resolved to their target.
    pub offsets: BTreeMap<InstrId, usize>,
    pub size: usize,
}

pub fn layout_arena(smem: &SharedMemPlan) -> ArenaLayout {
    let mut offsets = BTreeMap::new();
    let mut size = 0;
    for (id, bytes) in smem.allocations() {
        offsets.insert(id, size);
        size += align_up(bytes);
    }
    for (&id, d) in &smem.decisions {
        if let SmemDecision::Share(target) = d {
            if let Some(&off) = offsets.get(target) {
                offsets.insert(id, off);
            }
        }
    }
    ArenaLayout { offsets, size }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelProgram {
    pub blocks: usize,
    pub block_threads: usize,
    pub arena: ArenaLayout,
    pub statements: Vec<Statement>,
    pub members: BTreeSet<InstrId>,
    pub roots: Vec<InstrId>,
    /// Partition each materialized member is computed under.
    pub partitions: BTreeMap<InstrId, Partition>,
}

impl KernelProgram {
    pub fn shared_arena_bytes(&self) -> usize {
        self.arena.size
    }

    /// One statement per line: kind, instruction, schedule, destination.
    pub fn listing(&self, graph: &TensorGraph) -> String {
        let mut out = format!(
            "kernel blocks={} block_threads={} shared_arena_bytes={}\n",
            self.blocks, self.block_threads, self.arena.size
        );
        for s in &self.statements {
            let line = match s {
                Statement::Materialize {
                    instr,
                    schedule,
                    destination,
                } => {
                    let dest = match destination {
                        Destination::Shared(off) => format!("shared@{off}"),
                        Destination::Output(i) => format!("output#{i}"),
                    };
                    format!("materialize {} ({schedule}) -> {dest}", graph.name(*instr))
                }
                Statement::Barrier => "barrier".to_string(),
                Statement::InlineBinding { instr, generator } => {
                    let g = match generator {
                        Generator::Elemental => "elemental".to_string(),
                        Generator::SharedRead(off) => format!("shared_read@{off}"),
                        Generator::OutputRead(i) => format!("output_read#{i}"),
                    };
                    format!("bind {} = {g}", graph.name(*instr))
                }
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Destination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Destination::Shared(o) => write!(f, "Shared({o})"),
            Destination::Output(i) => write!(f, "Output({i})"),
        }
    }
}

fn inconsistent(graph: &TensorGraph, id: InstrId, message: impl Into<String>) -> CodegenError {
    CodegenError::Inconsistent {
        instr: graph.name(id).to_string(),
        message: message.into(),
    }
}

fn partition_of(graph: &TensorGraph, plan: &SchedulePlan, id: InstrId) -> Result<(Schedule, Partition), CodegenError> {
    let sched = plan
        .schedule(id)
        .ok_or_else(|| inconsistent(graph, id, "materialized member has no schedule"))?;
    let p = Partition::of(&graph.instr(id).shape, &sched).map_err(|e| inconsistent(graph, id, e.to_string()))?;
    Ok((sched, p))
}

pub fn emit(
    computation: &FusedComputation,
    graph: &TensorGraph,
    plan: &SchedulePlan,
    smem: &SharedMemPlan,
) -> Result<KernelProgram, CodegenError> {
    emit_with(computation, graph, plan, smem, false)
}

/// Every non-root member thread-composed: no shared memory at all.
pub fn emit_thread_composed(
    computation: &FusedComputation,
    graph: &TensorGraph,
    plan: &SchedulePlan,
) -> Result<KernelProgram, CodegenError> {
    emit_with(computation, graph, plan, &SharedMemPlan::default(), true)
}

fn emit_with(
    computation: &FusedComputation,
    graph: &TensorGraph,
    plan: &SchedulePlan,
    smem: &SharedMemPlan,
    inline_all: bool,
) -> Result<KernelProgram, CodegenError> {
    let arena = layout_arena(smem);
    let mut statements = Vec::new();
    let mut partitions = BTreeMap::new();
    for &hlo in &computation.order {
        let root = computation.root_index(hlo);
        let shared = smem.is_shared(hlo);
        let heavy = matches!(graph.instr(hlo).opcode, Opcode::Reduce { .. } | Opcode::BatchMatMul);
        if root.is_none() && !shared && (inline_all || !heavy) {
            statements.push(Statement::InlineBinding {
                instr: hlo,
                generator: Generator::Elemental,
            });
            continue;
        }
        let (schedule, partition) = partition_of(graph, plan, hlo)?;
        partitions.insert(hlo, partition);
        match root {
            Some(i) => {
                if shared {
                    return Err(inconsistent(graph, hlo, "root holds a shared buffer"));
                }
                statements.push(Statement::Materialize {
                    instr: hlo,
                    schedule,
                    destination: Destination::Output(i),
                });
                statements.push(Statement::InlineBinding {
                    instr: hlo,
                    generator: Generator::OutputRead(i),
                });
            }
            None => {
                let offset = *arena
                    .offsets
                    .get(&hlo)
                    .ok_or_else(|| inconsistent(graph, hlo, "stitched member lacks a shared buffer"))?;
                statements.push(Statement::Materialize {
                    instr: hlo,
                    schedule,
                    destination: Destination::Shared(offset),
                });
                statements.push(Statement::Barrier);
                statements.push(Statement::InlineBinding {
                    instr: hlo,
                    generator: Generator::SharedRead(offset),
                });
            }
        }
    }
    let program = KernelProgram {
        blocks: plan.blocks,
        block_threads: plan.block_threads,
        arena,
        statements,
        members: computation.members.clone(),
        roots: computation.roots.clone(),
        partitions,
    };
    check_legality(&program, graph)?;
    Ok(program)
}

/// Symbolic replay: shared reads follow a materialize and a barrier,
/// generators are bound before use, roots are written exactly once.
pub fn check_legality(program: &KernelProgram, graph: &TensorGraph) -> Result<(), CodegenError> {
    // offset -> (holder, barrier seen since its write)
    let mut written: BTreeMap<usize, (InstrId, bool)> = BTreeMap::new();
    let mut bound: BTreeSet<InstrId> = BTreeSet::new();
    let mut outputs: Vec<usize> = Vec::new();
    let operands_ready = |bound: &BTreeSet<InstrId>, id: InstrId| -> Result<(), CodegenError> {
        for &o in &graph.instr(id).operands {
            if program.members.contains(&o) && !bound.contains(&o) {
                return Err(inconsistent(graph, id, format!("operand `{}` used before it is bound", graph.name(o))));
            }
        }
        Ok(())
    };
    for s in &program.statements {
        match *s {
            Statement::Materialize {
                instr,
                destination,
                ..
            } => {
                operands_ready(&bound, instr)?;
                match destination {
                    Destination::Shared(off) => {
                        written.insert(off, (instr, false));
                    }
                    Destination::Output(i) => outputs.push(i),
                }
            }
            Statement::Barrier => {
                for v in written.values_mut() {
                    v.1 = true;
                }
            }
            Statement::InlineBinding { instr, generator } => {
                match generator {
                    Generator::Elemental => operands_ready(&bound, instr)?,
                    Generator::SharedRead(off) => match written.get(&off) {
                        Some(&(holder, true)) if holder == instr => {}
                        Some(&(_, false)) => {
                            return Err(inconsistent(graph, instr, "shared read before a barrier"))
                        }
                        _ => return Err(inconsistent(graph, instr, "shared read of an unwritten buffer")),
                    },
                    Generator::OutputRead(i) => {
                        if !outputs.contains(&i) {
                            return Err(inconsistent(graph, instr, "output read before it is written"));
                        }
                    }
                }
                bound.insert(instr);
            }
        }
    }
    let mut sorted = outputs.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != outputs.len() || sorted != (0..program.roots.len()).collect::<Vec<_>>() {
        return Err(CodegenError::Inconsistent {
            instr: program
                .roots
                .first()
                .map(|&r| graph.name(r).to_string())
                .unwrap_or_default(),
            message: format!("output destinations {outputs:?} do not cover the roots exactly once"),
        });
    }
    if bound != program.members {
        return Err(CodegenError::Inconsistent {
            instr: String::new(),
            message: "some members never receive a generator".into(),
        });
    }
    Ok(())
}
