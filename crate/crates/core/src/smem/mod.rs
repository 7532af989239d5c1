//! Shared-memory planning for one fused computation: which members keep
//! their per-block chunk in the shared arena, which recompute, and which
//! buffers are reused.

mod dominance;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use dominance::{naive_dominators, DominanceTree};

use crate::fusion::FusedComputation;
use crate::ir::{InstrId, Opcode, TensorGraph};
use crate::schedule::SchedulePlan;
use crate::span::SpanMap;

pub const DEFAULT_SMEM_LIMIT: usize = 20_480;
pub const BUFFER_ALIGN: usize = 8;

pub fn align_up(bytes: usize) -> usize {
    bytes.div_ceil(BUFFER_ALIGN) * BUFFER_ALIGN
}

/// Why a member wants shared memory; declaration order is the order in
/// which non-mandatory classes are shrunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CandidateClass {
    CheapMultiUser,
    ExpensiveMultiUser,
    ExpensiveFeedsDot,
    /// Non-root Reduce or BatchMatMul; never shrunk.
    Mandatory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requirement {
    pub bytes: usize,
    pub class: CandidateClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmemDecision {
    Alloc(usize),
    /// Reuses the buffer allocated by the target.
    Share(InstrId),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SharedMemPlan {
    pub decisions: BTreeMap<InstrId, SmemDecision>,
    /// Arena size: ALLOC bytes, each rounded up to 8.
    pub total_bytes: usize,
    /// Candidates demoted to recomputation, in demotion order.
    pub shrunk: Vec<InstrId>,
}

impl SharedMemPlan {
    pub fn decision(&self, id: InstrId) -> SmemDecision {
        self.decisions.get(&id).copied().unwrap_or(SmemDecision::None)
    }

    pub fn is_shared(&self, id: InstrId) -> bool {
        !matches!(self.decision(id), SmemDecision::None)
    }

    /// The ALLOC owner of the buffer `id` lives in.
    pub fn buffer_of(&self, id: InstrId) -> Option<InstrId> {
        match self.decision(id) {
            SmemDecision::Alloc(_) => Some(id),
            SmemDecision::Share(target) => Some(target),
            SmemDecision::None => None,
        }
    }

    pub fn allocations(&self) -> impl Iterator<Item = (InstrId, usize)> + '_ {
        self.decisions.iter().filter_map(|(&id, d)| match d {
            SmemDecision::Alloc(b) => Some((id, *b)),
            _ => None,
        })
    }

    pub fn render(&self, graph: &TensorGraph) -> String {
        let mut out = String::new();
        for (&id, d) in &self.decisions {
            let text = match d {
                SmemDecision::Alloc(b) => format!("ALLOC {b}"),
                SmemDecision::Share(t) => format!("SHARE {}", graph.name(*t)),
                SmemDecision::None => "NONE".to_string(),
            };
            out.push_str(&format!("{}: {text}\n", graph.name(id)));
        }
        out.push_str(&format!("total_bytes: {}\n", self.total_bytes));
        let shrunk: Vec<&str> = self.shrunk.iter().map(|&i| graph.name(i)).collect();
        out.push_str(&format!("shrunk: [{}]\n", shrunk.join(", ")));
        out
    }
}

/// True if `id` feeds a BatchMatMul member through shape-modulation members only.
fn reaches_dot_through_shape_ops(computation: &FusedComputation, graph: &TensorGraph, id: InstrId) -> bool {
    let mut stack: Vec<InstrId> = computation.member_users(graph, id).collect();
    let mut seen = BTreeSet::new();
    while let Some(u) = stack.pop() {
        if !seen.insert(u) {
            continue;
        }
        match graph.instr(u).opcode {
            Opcode::BatchMatMul => return true,
            ref op if op.is_shape_modulation() => stack.extend(computation.member_users(graph, u)),
            _ => {}
        }
    }
    false
}

pub fn size_requirements(
    computation: &FusedComputation,
    graph: &TensorGraph,
    plan: &SchedulePlan,
) -> BTreeMap<InstrId, Requirement> {
    let mut out = BTreeMap::new();
    for &m in &computation.members {
        if computation.is_root(m) {
            continue;
        }
        let instr = graph.instr(m);
        let class = match instr.opcode {
            Opcode::Reduce { .. } | Opcode::BatchMatMul => Some(CandidateClass::Mandatory),
            Opcode::Elementwise { expensive, .. } => {
                let multi = computation.member_users(graph, m).count() > 1;
                if multi && !expensive {
                    Some(CandidateClass::CheapMultiUser)
                } else if multi {
                    Some(CandidateClass::ExpensiveMultiUser)
                } else if expensive && reaches_dot_through_shape_ops(computation, graph, m) {
                    Some(CandidateClass::ExpensiveFeedsDot)
                } else {
                    None
                }
            }
            _ => None,
        };
        if let Some(class) = class {
            let bytes = plan.chunk_elements(graph, m) * instr.shape.dtype.element_size();
            out.insert(m, Requirement { bytes, class });
        }
    }
    out
}

/// Materialized members that read `id`'s value, directly or through
/// recomputed (inline) members.
fn readers(
    computation: &FusedComputation,
    graph: &TensorGraph,
    materialized: &BTreeSet<InstrId>,
    id: InstrId,
) -> BTreeSet<InstrId> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<InstrId> = computation.member_users(graph, id).collect();
    let mut seen = BTreeSet::new();
    while let Some(u) = stack.pop() {
        if !seen.insert(u) {
            continue;
        }
        if materialized.contains(&u) {
            out.insert(u);
        } else {
            stack.extend(computation.member_users(graph, u));
        }
    }
    out
}

/// Assigns ALLOC or SHARE to every kept candidate in execution order.
pub fn share(
    kept: &BTreeMap<InstrId, usize>,
    computation: &FusedComputation,
    graph: &TensorGraph,
    dom: &DominanceTree,
) -> SharedMemPlan {
    let position: BTreeMap<InstrId, usize> = computation
        .order
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, i))
        .collect();
    let materialized: BTreeSet<InstrId> = kept
        .keys()
        .copied()
        .chain(computation.roots.iter().copied())
        .collect();
    // (ALLOC owner, bytes, current occupant)
    let mut buffers: Vec<(InstrId, usize, InstrId)> = Vec::new();
    let mut decisions: BTreeMap<InstrId, SmemDecision> = computation
        .members
        .iter()
        .map(|&m| (m, SmemDecision::None))
        .collect();
    for &b in computation.order.iter().filter(|m| kept.contains_key(m)) {
        let need = kept[&b];
        let pos_b = position[&b];
        let reuse = buffers.iter_mut().find(|(_, bytes, occupant)| {
            need <= *bytes
                && dom.dominates(b, *occupant)
                && readers(computation, graph, &materialized, *occupant)
                    .iter()
                    .all(|r| position[r] <= pos_b)
        });
        match reuse {
            Some((owner, _, occupant)) => {
                *occupant = b;
                decisions.insert(b, SmemDecision::Share(*owner));
            }
            None => {
                buffers.push((b, need, b));
                decisions.insert(b, SmemDecision::Alloc(need));
            }
        }
    }
    let total_bytes = buffers.iter().map(|&(_, bytes, _)| align_up(bytes)).sum();
    SharedMemPlan {
        decisions,
        total_bytes,
        shrunk: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmemOutcome {
    Fits(SharedMemPlan),
    /// Mandatory buffers alone exceed the limit; fusion should drop
    /// `recommend` from the computation and try again.
    Infeasible {
        recommend: InstrId,
        required_bytes: usize,
        limit: usize,
    },
}

impl fmt::Display for SmemOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmemOutcome::Fits(p) => write!(f, "fits in {} bytes", p.total_bytes),
            SmemOutcome::Infeasible {
                required_bytes,
                limit,
                ..
            } => write!(f, "needs {required_bytes} bytes, limit {limit}"),
        }
    }
}

/// Shrinks candidates class by class (smallest span first within a class)
/// until the shared plan fits `limit`.
pub fn shrink(
    requirements: &BTreeMap<InstrId, Requirement>,
    computation: &FusedComputation,
    graph: &TensorGraph,
    span: &SpanMap,
    limit: usize,
) -> SmemOutcome {
    let dom = DominanceTree::build(computation, graph);
    let mut kept: BTreeMap<InstrId, usize> = requirements.iter().map(|(&id, r)| (id, r.bytes)).collect();
    let mut shrunk = Vec::new();
    loop {
        let mut plan = share(&kept, computation, graph, &dom);
        if plan.total_bytes <= limit {
            plan.shrunk = shrunk;
            return SmemOutcome::Fits(plan);
        }
        let victim = kept
            .keys()
            .copied()
            .filter(|id| requirements[id].class != CandidateClass::Mandatory)
            .min_by_key(|&id| (requirements[&id].class, span.span(id), id));
        match victim {
            Some(v) => {
                kept.remove(&v);
                shrunk.push(v);
            }
            None => {
                let (&recommend, _) = requirements
                    .iter()
                    .filter(|(_, r)| r.class == CandidateClass::Mandatory)
                    .max_by_key(|(&id, r)| (r.bytes, std::cmp::Reverse(id)))
                    .expect("over the limit with nothing left means a mandatory buffer remains");
                return SmemOutcome::Infeasible {
                    recommend,
                    required_bytes: plan.total_bytes,
                    limit,
                };
            }
        }
    }
}

pub fn plan_shared_memory(
    computation: &FusedComputation,
    graph: &TensorGraph,
    span: &SpanMap,
    plan: &SchedulePlan,
    limit: usize,
) -> SmemOutcome {
    let requirements = size_requirements(computation, graph, plan);
    shrink(&requirements, computation, graph, span, limit)
}
