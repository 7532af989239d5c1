use std::collections::{BTreeMap, BTreeSet};

use crate::fusion::FusedComputation;
use crate::ir::{InstrId, TensorGraph};

/// Dominators over reverse data flow inside one computation. A virtual
/// node above all roots is the tree root, so `idom` is `None` for members
/// dominated only by it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DominanceTree {
    idom: BTreeMap<InstrId, Option<InstrId>>,
    depth: BTreeMap<InstrId, usize>,
}

/// Member users of `id`; the virtual root counts as a predecessor of roots.
fn preds(computation: &FusedComputation, graph: &TensorGraph, id: InstrId) -> (Vec<InstrId>, bool) {
    let users = computation.member_users(graph, id).collect();
    (users, computation.is_root(id))
}

/// Members ordered so every user precedes its operands.
fn users_first(computation: &FusedComputation, graph: &TensorGraph) -> Vec<InstrId> {
    let mut pending: BTreeMap<InstrId, usize> = computation
        .members
        .iter()
        .map(|&m| (m, computation.member_users(graph, m).count()))
        .collect();
    let mut ready: BTreeSet<InstrId> = pending
        .iter()
        .filter(|(_, &n)| n == 0)
        .map(|(&m, _)| m)
        .collect();
    let mut out = Vec::with_capacity(pending.len());
    while let Some(m) = ready.pop_first() {
        out.push(m);
        let operands: BTreeSet<InstrId> = graph.instr(m).operands.iter().copied().collect();
        for o in operands {
            if let Some(n) = pending.get_mut(&o) {
                *n -= 1;
                if *n == 0 {
                    ready.insert(o);
                }
            }
        }
    }
    out
}

impl DominanceTree {
    pub fn build(computation: &FusedComputation, graph: &TensorGraph) -> Self {
        let mut idom: BTreeMap<InstrId, Option<InstrId>> = BTreeMap::new();
        let mut depth: BTreeMap<InstrId, usize> = BTreeMap::new();
        for m in users_first(computation, graph) {
            let (users, from_virtual) = preds(computation, graph, m);
            let parent = if from_virtual {
                None
            } else {
                let mut it = users.into_iter();
                let first = it.next().map(Some).unwrap_or(None);
                it.fold(first, |acc, u| lca(&idom, &depth, acc, Some(u)))
            };
            let d = parent.map_or(1, |p| depth[&p] + 1);
            idom.insert(m, parent);
            depth.insert(m, d);
        }
        DominanceTree { idom, depth }
    }

    /// Immediate dominator; `None` is the virtual root.
    pub fn idom(&self, id: InstrId) -> Option<InstrId> {
        self.idom.get(&id).copied().flatten()
    }

    pub fn idoms(&self) -> &BTreeMap<InstrId, Option<InstrId>> {
        &self.idom
    }

    /// True if `a` dominates `b` (reflexive).
    pub fn dominates(&self, a: InstrId, b: InstrId) -> bool {
        let mut cur = Some(b);
        while let Some(x) = cur {
            if x == a {
                return true;
            }
            cur = self.idom(x);
        }
        false
    }
}

fn lca(
    idom: &BTreeMap<InstrId, Option<InstrId>>,
    depth: &BTreeMap<InstrId, usize>,
    mut a: Option<InstrId>,
    mut b: Option<InstrId>,
) -> Option<InstrId> {
    let d = |x: Option<InstrId>| x.map_or(0, |x| depth[&x]);
    while a != b {
        if d(a) >= d(b) {
            a = a.and_then(|x| idom[&x]);
        } else {
            b = b.and_then(|x| idom[&x]);
        }
    }
    a
}

/// Reference dominator sets by fixed-point iteration; the virtual root is
/// left out of every set.
pub fn naive_dominators(computation: &FusedComputation, graph: &TensorGraph) -> BTreeMap<InstrId, BTreeSet<InstrId>> {
    let all: BTreeSet<InstrId> = computation.members.clone();
    let mut dom: BTreeMap<InstrId, BTreeSet<InstrId>> =
        all.iter().map(|&m| (m, all.clone())).collect();
    loop {
        let mut changed = false;
        for &m in &all {
            let (users, from_virtual) = preds(computation, graph, m);
            let mut set = if from_virtual {
                BTreeSet::new()
            } else {
                let mut it = users.iter();
                let first = it.next().map(|u| dom[u].clone()).unwrap_or_default();
                it.fold(first, |acc, u| acc.intersection(&dom[u]).copied().collect())
            };
            set.insert(m);
            if set != dom[&m] {
                dom.insert(m, set);
                changed = true;
            }
        }
        if !changed {
            return dom;
        }
    }
}
