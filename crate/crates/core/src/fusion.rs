//! Span-layered deep fusion.
//!
//! Each region between library-call layers is walked bottom-up. At every
//! root layer, same-shape elementwise instructions are grouped first; then
//! each resulting fusion instruction grows upward layer by layer, fusing
//! producers that pass [`Fuser::schd_consistent`].

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::ir::{InstrId, Opcode, Shape, TensorGraph};
use crate::schedule::{resolve_schedule, Schedule};
use crate::span::{compute_span, is_barrier, layers_between, same_frame, SpanMap};

pub const DEFAULT_FOOTPRINT_LIMIT: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedComputation {
    pub members: BTreeSet<InstrId>,
    /// Members with a user outside the computation, or graph outputs; id order.
    pub roots: Vec<InstrId>,
    pub fusion_root: InstrId,
    /// Bytes of distinct external inputs plus root outputs.
    pub footprint_bytes: usize,
    /// Execution order: descending span, then id.
    pub order: Vec<InstrId>,
}

impl FusedComputation {
    pub fn new(
        graph: &TensorGraph,
        span: &SpanMap,
        members: BTreeSet<InstrId>,
        fusion_root: InstrId,
    ) -> Self {
        let roots: Vec<InstrId> = members
            .iter()
            .copied()
            .filter(|&m| {
                graph.is_output(m) || graph.users(m).iter().any(|u| !members.contains(u))
            })
            .collect();
        let mut order: Vec<InstrId> = members.iter().copied().collect();
        order.sort_by_key(|&m| (Reverse(span.span(m)), m));
        let footprint_bytes = footprint(graph, &members, &roots);
        FusedComputation {
            members,
            roots,
            fusion_root,
            footprint_bytes,
            order,
        }
    }

    pub fn is_root(&self, id: InstrId) -> bool {
        self.roots.contains(&id)
    }

    pub fn root_index(&self, id: InstrId) -> Option<usize> {
        self.roots.iter().position(|&r| r == id)
    }

    /// Non-member operands read by the computation, id order.
    pub fn external_inputs(&self, graph: &TensorGraph) -> BTreeSet<InstrId> {
        self.members
            .iter()
            .flat_map(|&m| graph.instr(m).operands.iter().copied())
            .filter(|o| !self.members.contains(o))
            .collect()
    }

    /// Member users of `id` inside the computation.
    pub fn member_users<'a>(&'a self, graph: &'a TensorGraph, id: InstrId) -> impl Iterator<Item = InstrId> + 'a {
        graph
            .users(id)
            .iter()
            .copied()
            .filter(|u| self.members.contains(u))
    }
}

fn footprint(graph: &TensorGraph, members: &BTreeSet<InstrId>, roots: &[InstrId]) -> usize {
    let inputs: BTreeSet<InstrId> = members
        .iter()
        .flat_map(|&m| graph.instr(m).operands.iter().copied())
        .filter(|o| !members.contains(o))
        .collect();
    inputs
        .iter()
        .chain(roots)
        .map(|&i| graph.instr(i).shape.byte_size())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FusionPlan {
    pub computations: Vec<FusedComputation>,
    /// Barrier instructions left as standalone kernels.
    pub unfused: BTreeSet<InstrId>,
}

impl FusionPlan {
    pub fn computation_of(&self, id: InstrId) -> Option<usize> {
        self.computations
            .iter()
            .position(|c| c.members.contains(&id))
    }

    /// Launches implied by the plan; library calls are not counted.
    pub fn kernel_count(&self, graph: &TensorGraph) -> usize {
        self.computations.len()
            + self
                .unfused
                .iter()
                .filter(|&&i| graph.instr(i).opcode != Opcode::LibraryCall)
                .count()
    }

    pub fn render(&self, graph: &TensorGraph) -> String {
        let names = |ids: &mut dyn Iterator<Item = InstrId>| -> String {
            ids.map(|i| graph.name(i).to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = String::new();
        for (i, c) in self.computations.iter().enumerate() {
            out.push_str(&format!(
                "computation {i}: fusion_root={} footprint_bytes={}\n",
                graph.name(c.fusion_root),
                c.footprint_bytes
            ));
            out.push_str(&format!("  roots: {}\n", names(&mut c.roots.iter().copied())));
            out.push_str(&format!("  members: {}\n", names(&mut c.order.iter().copied())));
        }
        out.push_str(&format!(
            "unfused: {}\n",
            names(&mut self.unfused.iter().copied())
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionOptions {
    pub fuse_dot: bool,
    pub footprint_limit: usize,
    /// Instructions shared-memory planning asked to keep out of fused producers.
    pub vetoed: BTreeSet<InstrId>,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions {
            fuse_dot: false,
            footprint_limit: DEFAULT_FOOTPRINT_LIMIT,
            vetoed: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    CyclicRisk,
    NotProducerConsumer,
    NoSatisfiableSchedule,
    SmemInfeasible,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Reason::CyclicRisk => "CyclicRisk",
            Reason::NotProducerConsumer => "NotProducerConsumer",
            Reason::NoSatisfiableSchedule => "NoSatisfiableSchedule",
            Reason::SmemInfeasible => "SmemInfeasible",
        };
        f.write_str(s)
    }
}

/// Fusion state over one graph: which instructions already belong to a
/// computation.
pub struct Fuser<'g> {
    graph: &'g TensorGraph,
    span: &'g SpanMap,
    options: &'g FusionOptions,
    group_of: Vec<Option<usize>>,
    groups: Vec<BTreeSet<InstrId>>,
}

impl<'g> Fuser<'g> {
    pub fn new(graph: &'g TensorGraph, span: &'g SpanMap, options: &'g FusionOptions) -> Self {
        Fuser {
            graph,
            span,
            options,
            group_of: vec![None; graph.len()],
            groups: Vec::new(),
        }
    }

    fn fusable(&self, id: InstrId) -> bool {
        let instr = self.graph.instr(id);
        !instr.opcode.is_input() && !is_barrier(instr, self.options.fuse_dot)
    }

    fn assigned(&self, id: InstrId) -> bool {
        self.group_of[id.index()].is_some()
    }

    /// Adds a finished computation to the state.
    pub fn commit(&mut self, members: BTreeSet<InstrId>) -> usize {
        let idx = self.groups.len();
        for &m in &members {
            debug_assert!(self.group_of[m.index()].is_none());
            self.group_of[m.index()] = Some(idx);
        }
        self.groups.push(members);
        idx
    }

    /// True if condensing `set` (next to the committed computations) would
    /// close a cycle: some path leaves `set` and comes back.
    pub fn creates_cycle(&self, set: &BTreeSet<InstrId>) -> bool {
        let graph = self.graph;
        let mut seen = vec![false; graph.len()];
        let mut seen_group = vec![false; self.groups.len()];
        let mut queue: VecDeque<InstrId> = set
            .iter()
            .flat_map(|&m| graph.users(m).iter().copied())
            .filter(|u| !set.contains(u))
            .collect();
        while let Some(x) = queue.pop_front() {
            if set.contains(&x) {
                return true;
            }
            if std::mem::replace(&mut seen[x.index()], true) {
                continue;
            }
            let expand: Vec<InstrId> = match self.group_of[x.index()] {
                Some(g) if !std::mem::replace(&mut seen_group[g], true) => self.groups[g]
                    .iter()
                    .flat_map(|&m| graph.users(m).iter().copied())
                    .collect(),
                Some(_) => Vec::new(),
                None => graph.users(x).to_vec(),
            };
            queue.extend(expand);
        }
        false
    }

    fn footprint_of(&self, members: &BTreeSet<InstrId>) -> usize {
        let roots: Vec<InstrId> = members
            .iter()
            .copied()
            .filter(|&m| {
                self.graph.is_output(m)
                    || self.graph.users(m).iter().any(|u| !members.contains(u))
            })
            .collect();
        footprint(self.graph, members, &roots)
    }

    /// Groups the layer's unassigned elementwise instructions by output
    /// shape (and frame), greedily splitting groups at the footprint limit.
    pub fn elementwise_groups(&self, layer: u32) -> Vec<BTreeSet<InstrId>> {
        let mut by_shape: BTreeMap<(Shape, Option<String>), Vec<InstrId>> = BTreeMap::new();
        for &id in self.span.layer(layer) {
            let instr = self.graph.instr(id);
            if instr.opcode.is_elementwise()
                && !self.assigned(id)
                && !self.options.vetoed.contains(&id)
            {
                by_shape
                    .entry((instr.shape.clone(), instr.frame_id.clone()))
                    .or_default()
                    .push(id);
            }
        }
        let mut groups = Vec::new();
        for ids in by_shape.into_values() {
            let mut current: BTreeSet<InstrId> = BTreeSet::new();
            for id in ids {
                let mut trial = current.clone();
                trial.insert(id);
                let fits = current.is_empty()
                    || (self.footprint_of(&trial) <= self.options.footprint_limit
                        && !self.creates_cycle(&trial));
                if fits {
                    current = trial;
                } else {
                    groups.push(std::mem::take(&mut current));
                    current.insert(id);
                }
            }
            if !current.is_empty() {
                groups.push(current);
            }
        }
        groups.sort_by_key(|g| *g.first().expect("groups are non-empty"));
        groups
    }

    /// Decides whether `candidate` may join the computation grown from `fused`.
    pub fn schd_consistent(
        &self,
        fusion_root: InstrId,
        candidate: InstrId,
        fused: &BTreeSet<InstrId>,
        giveup: &BTreeSet<InstrId>,
    ) -> Result<(), Reason> {
        let graph = self.graph;
        let users = graph.users(candidate);
        if users.iter().any(|u| giveup.contains(u)) {
            return Err(Reason::CyclicRisk);
        }
        if !users.iter().any(|u| fused.contains(u) || *u == fusion_root) {
            return Err(Reason::NotProducerConsumer);
        }
        if is_barrier(graph.instr(candidate), self.options.fuse_dot) {
            return Err(Reason::NoSatisfiableSchedule);
        }
        if self.options.vetoed.contains(&candidate) {
            return Err(Reason::SmemInfeasible);
        }
        let mut tentative = fused.clone();
        tentative.insert(fusion_root);
        tentative.insert(candidate);
        if self.creates_cycle(&tentative) {
            return Err(Reason::CyclicRisk);
        }
        let computation = FusedComputation::new(graph, self.span, tentative, fusion_root);
        let roots: BTreeMap<InstrId, Schedule> = computation
            .roots
            .iter()
            .map(|&r| (r, Schedule::DEFAULT))
            .collect();
        resolve_schedule(&computation, graph, &roots, &BTreeSet::new())
            .map(|_| ())
            .map_err(|_| Reason::NoSatisfiableSchedule)
    }

    /// Layerwise producer fusion from a fusion instruction up to `roof`
    /// (exclusive). `seed` holds the fusion instruction's members.
    pub fn subgraph_fuse(&self, seed: &BTreeSet<InstrId>, fusion_root: InstrId, roof: u32) -> BTreeSet<InstrId> {
        let root_instr = self.graph.instr(fusion_root);
        let curr_span = self.span.span(fusion_root);
        let mut fused = seed.clone();
        let mut giveup = BTreeSet::new();
        for layer in curr_span + 1..roof {
            for &hlo in self.span.layer(layer) {
                let instr = self.graph.instr(hlo);
                if instr.opcode.is_input() || self.assigned(hlo) || !same_frame(instr, root_instr) {
                    continue;
                }
                match self.schd_consistent(fusion_root, hlo, &fused, &giveup) {
                    Ok(()) => {
                        fused.insert(hlo);
                    }
                    Err(_) => {
                        giveup.insert(hlo);
                    }
                }
            }
        }
        fused
    }

    pub fn into_plan(self) -> FusionPlan {
        let (graph, span, options) = (self.graph, self.span, self.options);
        let computations = self
            .groups
            .into_iter()
            .map(|members| {
                let fusion_root = *members.first().expect("non-empty");
                FusedComputation::new(graph, span, members, fusion_root)
            })
            .collect();
        let unfused = graph
            .ids()
            .filter(|&i| is_barrier(graph.instr(i), options.fuse_dot))
            .collect();
        FusionPlan {
            computations,
            unfused,
        }
    }
}

pub fn elementwise_fusion(
    graph: &TensorGraph,
    span: &SpanMap,
    layer: u32,
    footprint_limit: usize,
) -> Vec<FusedComputation> {
    let options = FusionOptions {
        footprint_limit,
        ..FusionOptions::default()
    };
    let fuser = Fuser::new(graph, span, &options);
    fuser
        .elementwise_groups(layer)
        .into_iter()
        .map(|g| {
            let root = *g.first().expect("non-empty");
            FusedComputation::new(graph, span, g, root)
        })
        .collect()
}

pub fn subgraph_fuse(
    graph: &TensorGraph,
    span: &SpanMap,
    fusion_root: InstrId,
    roof: u32,
    options: &FusionOptions,
) -> FusedComputation {
    let fuser = Fuser::new(graph, span, options);
    let members = fuser.subgraph_fuse(&BTreeSet::from([fusion_root]), fusion_root, roof);
    FusedComputation::new(graph, span, members, fusion_root)
}

pub fn fuse_module(graph: &TensorGraph, options: &FusionOptions) -> FusionPlan {
    let span = compute_span(graph);
    fuse_module_with_span(graph, &span, options)
}

pub fn fuse_module_with_span(graph: &TensorGraph, span: &SpanMap, options: &FusionOptions) -> FusionPlan {
    let mut fuser = Fuser::new(graph, span, options);
    for region in layers_between(span, graph, options.fuse_dot) {
        let roof = region.roof(span);
        for &layer in &region.layers {
            let mut seeds = fuser.elementwise_groups(layer);
            for &id in span.layer(layer) {
                let grouped = seeds.iter().any(|g| g.contains(&id));
                if !grouped && fuser.fusable(id) && !fuser.assigned(id) {
                    seeds.push(BTreeSet::from([id]));
                }
            }
            seeds.sort_by_key(|g| *g.first().expect("non-empty"));
            for seed in seeds {
                let fusion_root = *seed.first().expect("non-empty");
                let members = fuser.subgraph_fuse(&seed, fusion_root, roof);
                fuser.commit(members);
            }
        }
    }
    fuser.into_plan()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{ElementwiseKind, GraphBuilder, Shape};

    fn name_set(g: &TensorGraph, ids: &BTreeSet<InstrId>) -> Vec<String> {
        ids.iter().map(|&i| g.name(i).to_string()).collect()
    }

    #[test]
    fn same_shape_layer_forms_one_group() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[128]));
        b.parameter("y", Shape::f32(&[128]));
        b.elementwise("add", ElementwiseKind::Add, &["x", "y"]);
        b.elementwise("mul", ElementwiseKind::Mul, &["x", "y"]);
        b.output("add").output("mul");
        let g = b.build().unwrap();
        let span = compute_span(&g);
        let comps = elementwise_fusion(&g, &span, 0, DEFAULT_FOOTPRINT_LIMIT);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].members.len(), 2);
        assert_eq!(comps[0].roots.len(), 2);
    }

    #[test]
    fn different_shapes_split() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[128]));
        b.parameter("y", Shape::f32(&[64]));
        b.elementwise("a1", ElementwiseKind::Add, &["x", "x"]);
        b.elementwise("a2", ElementwiseKind::Add, &["y", "y"]);
        b.output("a1").output("a2");
        let g = b.build().unwrap();
        let span = compute_span(&g);
        assert_eq!(elementwise_fusion(&g, &span, 0, DEFAULT_FOOTPRINT_LIMIT).len(), 2);
    }

    #[test]
    fn footprint_limit_forces_singletons() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[8]));
        b.parameter("y", Shape::f32(&[8]));
        b.elementwise("add", ElementwiseKind::Add, &["x", "y"]);
        b.elementwise("exp", ElementwiseKind::Exp, &["y"]);
        b.output("add").output("exp");
        let g = b.build().unwrap();
        let span = compute_span(&g);
        // add alone: 2 inputs + 1 output of 32 bytes; together: 2 + 2.
        let comps = elementwise_fusion(&g, &span, 0, 100);
        assert_eq!(comps.len(), 2);
        assert!(comps.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn chain_fuses_completely() {
        let mut b = GraphBuilder::new();
        b.parameter("p", Shape::f32(&[16]));
        b.elementwise("exp", ElementwiseKind::Exp, &["p"]);
        b.elementwise("add", ElementwiseKind::Add, &["exp", "exp"]);
        b.elementwise("out", ElementwiseKind::Neg, &["add"]);
        b.output("out");
        let g = b.build().unwrap();
        let span = compute_span(&g);
        let root = g.id_of("out").unwrap();
        let c = subgraph_fuse(&g, &span, root, 10, &FusionOptions::default());
        assert_eq!(name_set(&g, &c.members), vec!["exp", "add", "out"]);
    }

    #[test]
    fn giveup_user_blocks_producer() {
        // u sits in layer 1 but has no user in the fused set (its user is
        // another output), so it is given up; p's user u is then in giveup.
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[4]));
        b.elementwise("p", ElementwiseKind::Exp, &["x"]);
        b.elementwise("u", ElementwiseKind::Neg, &["p"]);
        b.elementwise("other", ElementwiseKind::Neg, &["u"]);
        b.elementwise("r", ElementwiseKind::Add, &["p", "x"]);
        b.elementwise("root", ElementwiseKind::Neg, &["r"]);
        b.output("root").output("other");
        let g = b.build().unwrap();
        let span = compute_span(&g);
        let options = FusionOptions::default();
        let fuser = Fuser::new(&g, &span, &options);
        let root = g.id_of("root").unwrap();
        let id = |n: &str| g.id_of(n).unwrap();
        let fused = BTreeSet::from([root, id("r")]);
        let giveup = BTreeSet::from([id("u")]);
        assert_eq!(
            fuser.schd_consistent(root, id("p"), &fused, &giveup),
            Err(Reason::CyclicRisk)
        );
        assert_eq!(
            fuser.schd_consistent(root, id("u"), &fused, &BTreeSet::new()),
            Err(Reason::NotProducerConsumer)
        );
        assert_eq!(fuser.schd_consistent(root, id("r"), &BTreeSet::new(), &BTreeSet::new()), Ok(()));
        let c = fuser.subgraph_fuse(&BTreeSet::from([root]), root, 10);
        assert!(!c.contains(&id("p")) && !c.contains(&id("u")));
    }

    #[test]
    fn dot_candidate_is_a_barrier_without_dot_fusion() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[2, 4, 4]));
        b.parameter("y", Shape::f32(&[2, 4, 4]));
        b.batch_matmul("dot", "x", "y");
        b.elementwise("root", ElementwiseKind::Exp, &["dot"]);
        b.output("root");
        let g = b.build().unwrap();
        let span = compute_span(&g);
        let options = FusionOptions::default();
        let fuser = Fuser::new(&g, &span, &options);
        let root = g.id_of("root").unwrap();
        let dot = g.id_of("dot").unwrap();
        assert_eq!(
            fuser.schd_consistent(root, dot, &BTreeSet::new(), &BTreeSet::new()),
            Err(Reason::NoSatisfiableSchedule)
        );
        let on = FusionOptions { fuse_dot: true, ..FusionOptions::default() };
        let plan = fuse_module(&g, &on);
        assert_eq!(plan.computations.len(), 1);
        let off = fuse_module(&g, &options);
        assert_eq!(off.computations.len(), 1);
        assert!(off.unfused.contains(&dot));
    }

    #[test]
    fn vetoed_member_stays_out() {
        let mut b = GraphBuilder::new();
        b.parameter("p", Shape::f32(&[16]));
        b.elementwise("exp", ElementwiseKind::Exp, &["p"]);
        b.elementwise("out", ElementwiseKind::Neg, &["exp"]);
        b.output("out");
        let g = b.build().unwrap();
        let options = FusionOptions {
            vetoed: BTreeSet::from([g.id_of("exp").unwrap()]),
            ..FusionOptions::default()
        };
        let plan = fuse_module(&g, &options);
        assert_eq!(plan.computations.len(), 2);
    }
}
