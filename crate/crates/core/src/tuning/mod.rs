//! Schedule tuning against the performance library.
//!
//! A plan's cost is the launch overhead plus the sum of per-member costs of
//! its non-bypassed members. Member costs come from the library when present
//! and from [`estimate_cost`] otherwise (inserted as synthetic entries).

mod perflib;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use perflib::{PerfEntry, PerfKey, PerfLibrary, PerfStats, HEADER as PERFLIB_HEADER};

use crate::fusion::FusedComputation;
use crate::ir::{InstrId, Instruction, Opcode, TensorGraph};
use crate::schedule::{
    blocks_of, enumerate_schedules, resolve_schedule, Partition, Schedule, SchedulePlan, Unsatisfiable,
};

pub const BLOCK_THREADS_LADDER: [usize; 5] = [64, 128, 256, 512, 1024];
pub const DEFAULT_TRANSPOSE_THRESHOLD: usize = 4096;
/// Resident threads at which the device is considered saturated.
pub const FULL_OCCUPANCY_THREADS: usize = 57_344;
/// Upper bound on root-schedule combinations tried per blocks value.
pub const MAX_COMBINATIONS: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyOverride {
    pub blocks: usize,
    pub block_threads: usize,
    pub occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelParams {
    pub launch_overhead_us: f64,
    pub bandwidth_gb_s: f64,
    pub expensive_elementwise_factor: f64,
    pub dot_flops_g: f64,
    pub occupancy: Vec<OccupancyOverride>,
}

impl Default for CostModelParams {
    fn default() -> Self {
        CostModelParams {
            launch_overhead_us: 5.0,
            bandwidth_gb_s: 500.0,
            expensive_elementwise_factor: 2.0,
            dot_flops_g: 5000.0,
            occupancy: Vec::new(),
        }
    }
}

impl CostModelParams {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let params: CostModelParams =
            serde_json::from_str(text).map_err(|e| format!("cost params: {e}"))?;
        params.validate()?;
        Ok(params)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("launch_overhead_us", self.launch_overhead_us),
            ("bandwidth_gb_s", self.bandwidth_gb_s),
            ("expensive_elementwise_factor", self.expensive_elementwise_factor),
            ("dot_flops_g", self.dot_flops_g),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be strictly positive, got {v}"));
            }
        }
        for o in &self.occupancy {
            if !(o.occupancy.is_finite() && o.occupancy > 0.0) {
                return Err(format!(
                    "occupancy for ({}, {}) must be strictly positive",
                    o.blocks, o.block_threads
                ));
            }
        }
        Ok(())
    }

    pub fn occupancy(&self, blocks: usize, block_threads: usize, output_elements: usize) -> f64 {
        if let Some(o) = self
            .occupancy
            .iter()
            .find(|o| o.blocks == blocks && o.block_threads == block_threads)
        {
            return o.occupancy;
        }
        let active = (blocks * block_threads).min(output_elements).max(1);
        (active as f64 / FULL_OCCUPANCY_THREADS as f64).min(1.0)
    }
}

/// Trivial ops are skipped in cost sums and thread-composed in codegen.
pub fn classify_trivial(instr: &Instruction, threshold: usize) -> bool {
    match instr.opcode {
        Opcode::Reshape | Opcode::Bitcast | Opcode::Broadcast { .. } => true,
        Opcode::Transpose { .. } => instr.shape.element_count() < threshold,
        _ => false,
    }
}

/// Data volume and arithmetic of one op, independent of its schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpWork {
    pub bytes_moved: usize,
    pub flops: Option<f64>,
    pub expensive: bool,
}

pub fn op_work(graph: &TensorGraph, id: InstrId) -> OpWork {
    let instr = graph.instr(id);
    let operand_bytes: usize = instr
        .operands
        .iter()
        .map(|&o| graph.instr(o).shape.byte_size())
        .sum();
    let flops = match instr.opcode {
        Opcode::BatchMatMul | Opcode::LibraryCall => {
            let k = *graph.instr(instr.operands[0]).shape.dims.last().expect("rank >= 2");
            Some(2.0 * instr.shape.element_count() as f64 * k as f64)
        }
        _ => None,
    };
    OpWork {
        bytes_moved: operand_bytes + instr.shape.byte_size(),
        flops,
        expensive: instr.opcode.is_expensive_elementwise(),
    }
}

pub fn perf_key(graph: &TensorGraph, id: InstrId, schedule: &Schedule, block_threads: usize) -> PerfKey {
    let instr = graph.instr(id);
    let extra = match instr.opcode {
        Opcode::Reduce { .. } | Opcode::Transpose { .. } => Some(block_threads / 32),
        _ => None,
    };
    PerfKey {
        opcode: instr.opcode.name().to_string(),
        shape: instr.shape.dims.clone(),
        split_dim: schedule.split_dim,
        sword: schedule.sword,
        sched_type: schedule.sched_type,
        block_threads,
        extra,
    }
}

/// Analytical per-op cost in microseconds.
pub fn estimate_cost(key: &PerfKey, work: &OpWork, params: &CostModelParams) -> f64 {
    let elements: usize = key.shape.iter().product();
    let shape = crate::ir::Shape::f32(&key.shape);
    let blocks = blocks_of(&shape, &key.schedule()).unwrap_or(1);
    let occupancy = params.occupancy(blocks, key.block_threads, elements);
    let factor = if work.expensive {
        params.expensive_elementwise_factor
    } else {
        1.0
    };
    let memory = work.bytes_moved as f64 / (params.bandwidth_gb_s * 1e3 * occupancy) * factor;
    match work.flops {
        Some(flops) => memory.max(flops / (params.dot_flops_g * 1e3 * occupancy)),
        None => memory,
    }
}

pub fn lookup_or_estimate(
    lib: &PerfLibrary,
    graph: &TensorGraph,
    id: InstrId,
    schedule: &Schedule,
    block_threads: usize,
    params: &CostModelParams,
) -> f64 {
    let key = perf_key(graph, id, schedule, block_threads);
    let cost = lib.get_or_insert_with(&key, || estimate_cost(&key, &op_work(graph, id), params));
    assert!(cost >= 0.0, "per-op costs must be non-negative");
    cost
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TuneOptions {
    pub block_threads: Vec<usize>,
    pub transpose_threshold: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            block_threads: BLOCK_THREADS_LADDER.to_vec(),
            transpose_threshold: DEFAULT_TRANSPOSE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub plan: SchedulePlan,
    pub cost_us: f64,
    /// (root schedules, block_threads) candidates fully costed.
    pub evaluated: usize,
    /// Candidates abandoned once a partial sum exceeded the incumbent.
    pub pruned: usize,
    /// Root-schedule combinations with no satisfiable plan.
    pub unsatisfiable: usize,
}

impl TuneResult {
    pub fn root_schedules(&self, computation: &FusedComputation) -> Vec<Schedule> {
        computation
            .roots
            .iter()
            .map(|r| self.plan.schedule(*r).expect("roots carry schedules"))
            .collect()
    }
}

pub fn bypass_set(computation: &FusedComputation, graph: &TensorGraph, threshold: usize) -> BTreeSet<InstrId> {
    computation
        .members
        .iter()
        .copied()
        .filter(|&m| !computation.is_root(m) && classify_trivial(graph.instr(m), threshold))
        .collect()
}

/// Launch overhead plus the summed member costs.
pub fn plan_cost(
    graph: &TensorGraph,
    plan: &SchedulePlan,
    lib: &PerfLibrary,
    params: &CostModelParams,
) -> f64 {
    params.launch_overhead_us
        + plan
            .per_instruction
            .iter()
            .map(|(&id, s)| lookup_or_estimate(lib, graph, id, s, plan.block_threads, params))
            .sum::<f64>()
}

/// Strict improvement under (cost, larger blocks, smaller block_threads);
/// equal keys keep the earlier candidate.
fn better(cost: f64, blocks: usize, threads: usize, best: &Option<TuneResult>) -> bool {
    match best {
        None => true,
        Some(b) => match cost.total_cmp(&b.cost_us) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => {
                (Reverse(blocks), threads) < (Reverse(b.plan.blocks), b.plan.block_threads)
            }
        },
    }
}


pub fn tune(
    computation: &FusedComputation,
    graph: &TensorGraph,
    lib: &PerfLibrary,
    params: &CostModelParams,
    options: &TuneOptions,
) -> Result<TuneResult, Unsatisfiable> {
    if computation.roots.len() == 1 {
        tune_single_root(computation, graph, lib, params, options)
    } else {
        tune_multi_root(computation, graph, lib, params, options)
    }
}

pub fn tune_single_root(
    computation: &FusedComputation,
    graph: &TensorGraph,
    lib: &PerfLibrary,
    params: &CostModelParams,
    options: &TuneOptions,
) -> Result<TuneResult, Unsatisfiable> {
    assert_eq!(computation.roots.len(), 1, "single-root tuning needs exactly one root");
    let root = computation.roots[0];
    let bypass = bypass_set(computation, graph, options.transpose_threshold);
    let mut best: Option<TuneResult> = None;
    let (mut evaluated, mut unsatisfiable) = (0, 0);
    for sched in enumerate_schedules(&graph.instr(root).shape) {
        let Ok(plan) = resolve_schedule(computation, graph, &BTreeMap::from([(root, sched)]), &bypass) else {
            unsatisfiable += 1;
            continue;
        };
        for &threads in &options.block_threads {
            let mut plan = plan.clone();
            plan.block_threads = threads;
            let cost = plan_cost(graph, &plan, lib, params);
            evaluated += 1;
            if better(cost, plan.blocks, threads, &best) {
                best = Some(TuneResult {
                    plan,
                    cost_us: cost,
                    evaluated: 0,
                    pruned: 0,
                    unsatisfiable: 0,
                });
            }
        }
    }
    finish(best, computation, graph, evaluated, 0, unsatisfiable)
}

fn finish(
    best: Option<TuneResult>,
    computation: &FusedComputation,
    graph: &TensorGraph,
    evaluated: usize,
    pruned: usize,
    unsatisfiable: usize,
) -> Result<TuneResult, Unsatisfiable> {
    let mut best = best.ok_or_else(|| Unsatisfiable {
        instr: graph.name(computation.fusion_root).to_string(),
        reason: "no satisfiable schedule, not even the default".into(),
    })?;
    best.evaluated = evaluated;
    best.pruned = pruned;
    best.unsatisfiable = unsatisfiable;
    Ok(best)
}

/// Per root: blocks value → schedules yielding it, first of each distinct
/// partition in enumeration order.
pub fn blocks_candidates(
    computation: &FusedComputation,
    graph: &TensorGraph,
) -> Vec<BTreeMap<usize, Vec<Schedule>>> {
    computation
        .roots
        .iter()
        .map(|&r| {
            let shape = &graph.instr(r).shape;
            let mut by_blocks: BTreeMap<usize, Vec<(Partition, Schedule)>> = BTreeMap::new();
            for s in enumerate_schedules(shape) {
                let p = Partition::of(shape, &s).expect("enumerated schedules are valid");
                let list = by_blocks.entry(p.blocks).or_default();
                if !list.iter().any(|(q, _)| *q == p) {
                    list.push((p, s));
                }
            }
            by_blocks
                .into_iter()
                .map(|(b, l)| (b, l.into_iter().map(|(_, s)| s).collect()))
                .collect()
        })
        .collect()
}

pub fn intersect_blocks(sets: &[BTreeSet<usize>]) -> BTreeSet<usize> {
    let mut iter = sets.iter();
    let Some(first) = iter.next() else {
        return BTreeSet::new();
    };
    iter.fold(first.clone(), |acc, s| acc.intersection(s).copied().collect())
}

/// For each member, the index of the first root (in root order) it feeds.
fn root_owners(computation: &FusedComputation, graph: &TensorGraph) -> BTreeMap<InstrId, usize> {
    let mut owner = BTreeMap::new();
    for (i, &root) in computation.roots.iter().enumerate() {
        let mut stack = vec![root];
        while let Some(x) = stack.pop() {
            if owner.contains_key(&x) {
                continue;
            }
            owner.insert(x, i);
            for &o in &graph.instr(x).operands {
                if computation.members.contains(&o) && !owner.contains_key(&o) {
                    stack.push(o);
                }
            }
        }
    }
    owner
}

pub fn tune_multi_root(
    computation: &FusedComputation,
    graph: &TensorGraph,
    lib: &PerfLibrary,
    params: &CostModelParams,
    options: &TuneOptions,
) -> Result<TuneResult, Unsatisfiable> {
    let bypass = bypass_set(computation, graph, options.transpose_threshold);
    let candidates = blocks_candidates(computation, graph);
    let sets: Vec<BTreeSet<usize>> = candidates.iter().map(|c| c.keys().copied().collect()).collect();
    let agreed = intersect_blocks(&sets);
    let owners = root_owners(computation, graph);
    let k = computation.roots.len();

    let mut best: Option<TuneResult> = None;
    let (mut evaluated, mut pruned, mut unsatisfiable) = (0, 0, 0);
    // Larger blocks first: they usually win, which makes pruning bite early.
    for &blocks in agreed.iter().rev() {
        let lists: Vec<&Vec<Schedule>> = candidates.iter().map(|c| &c[&blocks]).collect();
        let mut index = vec![0usize; k];
        let mut tried = 0;
        loop {
            tried += 1;
            let roots: BTreeMap<InstrId, Schedule> = computation
                .roots
                .iter()
                .enumerate()
                .map(|(i, &r)| (r, lists[i][index[i]]))
                .collect();
            match resolve_schedule(computation, graph, &roots, &bypass) {
                Err(_) => unsatisfiable += 1,
                Ok(plan) => {
                    for &threads in &options.block_threads {
                        // Partial sums root by root; members are charged to the first root they feed.
                        let mut total = params.launch_overhead_us;
                        let mut abandoned = false;
                        for owner in 0..k {
                            for (&id, s) in &plan.per_instruction {
                                if owners.get(&id) == Some(&owner) {
                                    total += lookup_or_estimate(lib, graph, id, s, threads, params);
                                }
                            }
                            if owner + 1 < k && best.as_ref().is_some_and(|b| total > b.cost_us * (1.0 + 1e-12)) {
                                abandoned = true;
                                break;
                            }
                        }
                        if abandoned {
                            pruned += 1;
                            continue;
                        }
                        evaluated += 1;
                        let mut plan = plan.clone();
                        plan.block_threads = threads;
                        // Re-sum in member order so equal plans cost bit-identically.
                        let total = plan_cost(graph, &plan, lib, params);
                        if better(total, plan.blocks, threads, &best) {
                            best = Some(TuneResult {
                                plan,
                                cost_us: total,
                                evaluated: 0,
                                pruned: 0,
                                unsatisfiable: 0,
                            });
                        }
                    }
                }
            }
            if tried >= MAX_COMBINATIONS || !advance(&mut index, &lists) {
                break;
            }
        }
    }
    finish(best, computation, graph, evaluated, pruned, unsatisfiable)
}

/// Odometer step, last root varying fastest.
fn advance(index: &mut [usize], lists: &[&Vec<Schedule>]) -> bool {
    for i in (0..index.len()).rev() {
        index[i] += 1;
        if index[i] < lists[i].len() {
            return true;
        }
        index[i] = 0;
    }
    false
}

/// Reference search: every combination of enumerated root schedules and
/// every ladder value, no deduplication, no pruning.
pub fn exhaustive_tune(
    computation: &FusedComputation,
    graph: &TensorGraph,
    lib: &PerfLibrary,
    params: &CostModelParams,
    options: &TuneOptions,
) -> Option<(f64, SchedulePlan)> {
    let bypass = bypass_set(computation, graph, options.transpose_threshold);
    let lists: Vec<Vec<Schedule>> = computation
        .roots
        .iter()
        .map(|&r| enumerate_schedules(&graph.instr(r).shape))
        .collect();
    let refs: Vec<&Vec<Schedule>> = lists.iter().collect();
    let mut index = vec![0usize; lists.len()];
    let mut best: Option<(f64, SchedulePlan)> = None;
    loop {
        let roots: BTreeMap<InstrId, Schedule> = computation
            .roots
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, lists[i][index[i]]))
            .collect();
        if let Ok(plan) = resolve_schedule(computation, graph, &roots, &bypass) {
            for &threads in &options.block_threads {
                let mut plan = plan.clone();
                plan.block_threads = threads;
                let cost = plan_cost(graph, &plan, lib, params);
                if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    best = Some((cost, plan));
                }
            }
        }
        if !advance(&mut index, &refs) {
            break;
        }
    }
    best
}

/// Number of root-schedule combinations [`exhaustive_tune`] visits.
pub fn candidate_count(computation: &FusedComputation, graph: &TensorGraph) -> usize {
    computation
        .roots
        .iter()
        .map(|&r| enumerate_schedules(&graph.instr(r).shape).len())
        .product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{ElementwiseKind, GraphBuilder, Shape};
    use crate::span::compute_span;

    fn whole(g: &TensorGraph, root: &str) -> FusedComputation {
        let span = compute_span(g);
        let members = g.ids().filter(|&i| !g.instr(i).opcode.is_input()).collect();
        FusedComputation::new(g, &span, members, g.id_of(root).unwrap())
    }

    #[test]
    fn trivial_classification() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[16, 16]));
        b.parameter("y", Shape::f32(&[256, 256]));
        b.bitcast("bc", "x", &[256]);
        b.transpose("t1", "x", &[1, 0]);
        b.transpose("t2", "y", &[1, 0]);
        b.output("bc").output("t1").output("t2");
        let g = b.build().unwrap();
        let c = |n: &str| classify_trivial(g.instr(g.id_of(n).unwrap()), 4096);
        assert!(c("bc"));
        assert!(c("t1"));
        assert!(!c("t2"));
    }

    #[test]
    fn exp_estimate_matches_closed_form() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[1024, 1024]));
        b.elementwise("e", ElementwiseKind::Exp, &["x"]);
        b.output("e");
        let g = b.build().unwrap();
        let lib = PerfLibrary::new();
        let params = CostModelParams::default();
        let e = g.id_of("e").unwrap();
        let sched = Schedule::row(0, 1024);
        let got = lookup_or_estimate(&lib, &g, e, &sched, 256, &params);
        // 1024 blocks x 256 threads saturates; exp reads and writes 4 MiB each.
        let expected = (2.0 * 4.0 * 1024.0 * 1024.0) / (500.0 * 1e3) * 2.0;
        assert_eq!(got, expected);
    }

    #[test]
    fn only_default_satisfiable_is_chosen() {
        // [1] admits only whole-tensor schedules.
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[1]));
        b.elementwise("e", ElementwiseKind::Exp, &["x"]);
        b.output("e");
        let g = b.build().unwrap();
        let c = whole(&g, "e");
        let r = tune(&c, &g, &PerfLibrary::new(), &CostModelParams::default(), &TuneOptions::default()).unwrap();
        assert_eq!(r.plan.blocks, 1);
        assert_eq!(r.root_schedules(&c), vec![Schedule::DEFAULT]);
    }

    #[test]
    fn pinned_costs_pick_the_cheaper_plan() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[2]));
        b.elementwise("e", ElementwiseKind::Neg, &["x"]);
        b.output("e");
        let g = b.build().unwrap();
        let c = whole(&g, "e");
        let e = g.id_of("e").unwrap();
        let lib = PerfLibrary::new();
        for s in enumerate_schedules(&g.instr(e).shape) {
            let cost = if s == Schedule::row(0, 2) { 7.0 } else { 10.0 };
            for t in BLOCK_THREADS_LADDER {
                lib.insert(perf_key(&g, e, &s, t), PerfEntry { cost_us: cost, synthetic: false });
            }
        }
        let r = tune(&c, &g, &lib, &CostModelParams::default(), &TuneOptions::default()).unwrap();
        assert_eq!(r.cost_us, 5.0 + 7.0);
        assert_eq!(r.plan.blocks, 2);
        assert_eq!(r.plan.block_threads, 64);
    }

    #[test]
    fn blocks_intersection() {
        let sets = [BTreeSet::from([1, 4, 8]), BTreeSet::from([1, 8, 16])];
        assert_eq!(intersect_blocks(&sets), BTreeSet::from([1, 8]));
    }

    #[test]
    fn symmetric_roots_match_single_root() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[8, 4]));
        b.elementwise("a", ElementwiseKind::Exp, &["x"]);
        b.elementwise("n", ElementwiseKind::Neg, &["x"]);
        b.output("a").output("n");
        let g = b.build().unwrap();
        let multi = whole(&g, "a");
        let params = CostModelParams::default();
        let opts = TuneOptions::default();
        let m = tune(&multi, &g, &PerfLibrary::new(), &params, &opts).unwrap();

        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[8, 4]));
        b.elementwise("a", ElementwiseKind::Exp, &["x"]);
        b.output("a");
        let g1 = b.build().unwrap();
        let single = whole(&g1, "a");
        let s = tune(&single, &g1, &PerfLibrary::new(), &params, &opts).unwrap();
        let ma = m.plan.schedule(g.id_of("a").unwrap()).unwrap();
        let sa = s.plan.schedule(g1.id_of("a").unwrap()).unwrap();
        assert_eq!(
            Partition::of(&Shape::f32(&[8, 4]), &ma).unwrap(),
            Partition::of(&Shape::f32(&[8, 4]), &sa).unwrap()
        );
        assert_eq!((m.plan.blocks, m.plan.block_threads), (s.plan.blocks, s.plan.block_threads));
    }

    #[test]
    fn multi_root_matches_exhaustive_and_prunes() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[64, 1024]));
        b.elementwise("e", ElementwiseKind::Exp, &["x"]);
        b.elementwise("a", ElementwiseKind::Add, &["e", "x"]);
        b.elementwise("n", ElementwiseKind::Neg, &["e"]);
        b.output("a").output("n");
        let g = b.build().unwrap();
        let c = whole(&g, "a");
        let params = CostModelParams::default();
        let opts = TuneOptions::default();
        let lib = PerfLibrary::new();
        let r = tune(&c, &g, &lib, &params, &opts).unwrap();
        let (oracle, _) = exhaustive_tune(&c, &g, &lib, &params, &opts).unwrap();
        assert_eq!(r.cost_us, oracle);
        assert!(r.pruned > 0);
    }

    #[test]
    fn cost_params_json() {
        let p = CostModelParams::from_json(r#"{"bandwidth_gb_s": 900.0}"#).unwrap();
        assert_eq!(p.bandwidth_gb_s, 900.0);
        assert_eq!(p.launch_overhead_us, 5.0);
        assert!(CostModelParams::from_json(r#"{"dot_flops_g": 0}"#).is_err());
        assert!(CostModelParams::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
