//! Independent oracles shared by the integration suites.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use stitchfuse::fusion::FusionPlan;
use stitchfuse::ir::{InstrId, Shape, TensorGraph};

/// Longest path from `id` to a frame-local sink by explicit enumeration of
/// every path.
pub fn brute_longest_path(graph: &TensorGraph, id: InstrId) -> u32 {
    let me = graph.instr(id);
    graph
        .users(id)
        .iter()
        .filter(|&&u| graph.instr(u).frame_id == me.frame_id)
        .map(|&u| 1 + brute_longest_path(graph, u))
        .max()
        .unwrap_or(0)
}

/// Condensed graph of a fusion plan (every computation one node, every other
/// instruction its own node), topologically sorted; `None` on a cycle.
pub fn condensation_order(graph: &TensorGraph, plan: &FusionPlan) -> Option<Vec<usize>> {
    let mut node_of: BTreeMap<InstrId, usize> = BTreeMap::new();
    for (k, c) in plan.computations.iter().enumerate() {
        for &m in &c.members {
            node_of.insert(m, k);
        }
    }
    let mut next = plan.computations.len();
    for id in graph.ids() {
        node_of.entry(id).or_insert_with(|| {
            next += 1;
            next - 1
        });
    }
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for id in graph.ids() {
        for &o in &graph.instr(id).operands {
            let (a, b) = (node_of[&o], node_of[&id]);
            if a != b {
                edges.insert((a, b));
            }
        }
    }
    let mut indegree = vec![0usize; next];
    for &(_, b) in &edges {
        indegree[b] += 1;
    }
    let mut queue: VecDeque<usize> = (0..next).filter(|&n| indegree[n] == 0).collect();
    let mut order = Vec::with_capacity(next);
    while let Some(n) = queue.pop_front() {
        order.push(n);
        for &(a, b) in edges.range((n, 0)..(n + 1, 0)) {
            debug_assert_eq!(a, n);
            indegree[b] -= 1;
            if indegree[b] == 0 {
                queue.push_back(b);
            }
        }
    }
    (order.len() == next).then_some(order)
}

/// Every rank-1..=3 shape with extents in 1..=max.
pub fn small_shapes(max: usize) -> Vec<Shape> {
    let mut out = Vec::new();
    for a in 1..=max {
        out.push(Shape::f32(&[a]));
        for b in 1..=max {
            out.push(Shape::f32(&[a, b]));
            for c in 1..=max {
                out.push(Shape::f32(&[a, b, c]));
            }
        }
    }
    out
}

/// Row-major index -> block, computed from the chunk geometry definition:
/// Row fixes the dims left of the split and slices the split dim; Column
/// fixes the dims right of it.
pub fn oracle_block(shape: &Shape, split_dim: usize, sword: usize, row: bool, index: &[usize]) -> usize {
    let slice = index[split_dim] / (shape.dims[split_dim] / sword);
    if row {
        let prefix = (0..split_dim).fold(0, |acc, d| acc * shape.dims[d] + index[d]);
        prefix * sword + slice
    } else {
        let suffix = (split_dim + 1..shape.rank()).fold(0, |acc, d| acc * shape.dims[d] + index[d]);
        slice * (split_dim + 1..shape.rank()).map(|d| shape.dims[d]).product::<usize>() + suffix
    }
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}
