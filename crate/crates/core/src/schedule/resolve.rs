use std::collections::{BTreeMap, BTreeSet};

use super::{blocks_of, propagate, Partition, Schedule, Unsatisfiable};
use crate::fusion::FusedComputation;
use crate::ir::{InstrId, TensorGraph};

/// A resolved schedule for every member of one fused computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulePlan {
    /// Schedule of each non-bypassed member, on that member's output shape.
    pub per_instruction: BTreeMap<InstrId, Schedule>,
    pub blocks: usize,
    pub block_threads: usize,
    /// Trivial members inlined through thread composition.
    pub bypassed: BTreeSet<InstrId>,
}

impl SchedulePlan {
    pub fn schedule(&self, id: InstrId) -> Option<Schedule> {
        self.per_instruction.get(&id).copied()
    }

    /// How block `b` of the kernel maps onto this member's elements.
    pub fn partition(&self, graph: &TensorGraph, id: InstrId) -> Option<Partition> {
        let shape = &graph.instr(id).shape;
        self.schedule(id)
            .map(|s| Partition::of(shape, &s).expect("resolved schedules are valid"))
    }

    /// Members computed whole by every block of a multi-block kernel.
    pub fn is_replicated(&self, graph: &TensorGraph, id: InstrId) -> bool {
        self.blocks > 1 && self.partition(graph, id).is_some_and(|p| p.is_whole())
    }

    /// Elements of `id` one block materializes.
    pub fn chunk_elements(&self, graph: &TensorGraph, id: InstrId) -> usize {
        self.partition(graph, id)
            .map(|p| p.chunk_len)
            .unwrap_or_else(|| graph.instr(id).shape.element_count())
    }
}

/// Back-propagates root schedules through the computation, users before
/// producers. A member reached from several users must receive the same
/// partition from all of them. Members in `bypass` that are not roots get
/// no schedule of their own; when their rule fails their operands are read
/// whole.
pub fn resolve_schedule(
    computation: &FusedComputation,
    graph: &TensorGraph,
    root_schedules: &BTreeMap<InstrId, Schedule>,
    bypass: &BTreeSet<InstrId>,
) -> Result<SchedulePlan, Unsatisfiable> {
    let unsat = |id: InstrId, reason: String| Unsatisfiable {
        instr: graph.name(id).to_string(),
        reason,
    };
    let mut blocks = None;
    for &root in &computation.roots {
        let sched = root_schedules
            .get(&root)
            .ok_or_else(|| unsat(root, "no schedule given for root".into()))?;
        let b = blocks_of(&graph.instr(root).shape, sched).map_err(|e| unsat(root, e.to_string()))?;
        match blocks {
            None => blocks = Some(b),
            Some(prev) if prev != b => {
                return Err(unsat(root, format!("root yields {b} blocks, other roots {prev}")))
            }
            _ => {}
        }
    }
    let blocks = blocks.ok_or_else(|| unsat(computation.fusion_root, "computation has no roots".into()))?;

    let mut incoming: BTreeMap<InstrId, Vec<Schedule>> = BTreeMap::new();
    let mut per_instruction = BTreeMap::new();
    let mut bypassed = BTreeSet::new();
    for &id in computation.order.iter().rev() {
        let instr = graph.instr(id);
        let is_root = computation.is_root(id);
        let mut received = incoming.remove(&id).unwrap_or_default();
        if is_root {
            received.insert(0, root_schedules[&id]);
        }
        let Some(&sched) = received.first() else {
            return Err(unsat(id, "member is not reached from any root".into()));
        };
        let partition = Partition::of(&instr.shape, &sched).map_err(|e| unsat(id, e.to_string()))?;
        for other in &received[1..] {
            let p = Partition::of(&instr.shape, other).map_err(|e| unsat(id, e.to_string()))?;
            if p != partition {
                return Err(unsat(
                    id,
                    format!("users require conflicting schedules ({sched}) and ({other})"),
                ));
            }
        }
        let trivial = bypass.contains(&id) && !is_root;
        let operand_schedules = match propagate(graph, instr, &sched) {
            Ok(list) => list,
            Err(_) if trivial => instr
                .operands
                .iter()
                .enumerate()
                .map(|(i, _)| (i, Schedule::DEFAULT))
                .collect(),
            Err(e) => return Err(e),
        };
        for (idx, s) in operand_schedules {
            let operand = instr.operands[idx];
            if computation.members.contains(&operand) {
                incoming.entry(operand).or_default().push(s);
            }
        }
        if trivial {
            bypassed.insert(id);
        } else {
            if partition.blocks != blocks && partition.blocks != 1 {
                return Err(unsat(
                    id,
                    format!("schedule ({sched}) yields {} blocks, kernel has {blocks}", partition.blocks),
                ));
            }
            per_instruction.insert(id, sched);
        }
    }
    Ok(SchedulePlan {
        per_instruction,
        blocks,
        block_threads: 128,
        bypassed,
    })
}
