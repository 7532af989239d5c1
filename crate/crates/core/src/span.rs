//! Work/Span analysis.
//!
//! Outputs have span 0 and every other instruction sits one layer above the
//! highest-span user it feeds. Frames are analysed independently: an edge
//! whose endpoints carry different `frame_id`s does not contribute.

use std::collections::BTreeMap;

use crate::ir::{InstrId, Instruction, Opcode, TensorGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanMap {
    span: Vec<u32>,
    critical_path_length: u32,
    layers: BTreeMap<u32, Vec<InstrId>>,
}

impl SpanMap {
    pub fn span(&self, id: InstrId) -> u32 {
        self.span[id.index()]
    }

    pub fn critical_path_length(&self) -> u32 {
        self.critical_path_length
    }

    pub fn layers(&self) -> &BTreeMap<u32, Vec<InstrId>> {
        &self.layers
    }

    /// Instructions of one layer in id order; empty if the layer does not exist.
    pub fn layer(&self, span: u32) -> &[InstrId] {
        self.layers.get(&span).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Renders the `layer N: a, b` table printed by the CLI.
    pub fn render(&self, graph: &TensorGraph) -> String {
        let mut out = String::new();
        for (layer, ids) in &self.layers {
            let names: Vec<&str> = ids.iter().map(|&i| graph.name(i)).collect();
            out.push_str(&format!("layer {layer}: {}\n", names.join(", ")));
        }
        out.push_str(&format!(
            "critical_path_length: {}\n",
            self.critical_path_length
        ));
        out
    }
}

pub(crate) fn same_frame(a: &Instruction, b: &Instruction) -> bool {
    a.frame_id == b.frame_id
}

pub fn compute_span(graph: &TensorGraph) -> SpanMap {
    let order = graph.topological_order();
    debug_assert_eq!(order.len(), graph.len(), "graph validated acyclic");
    let mut span = vec![0u32; graph.len()];
    for &id in order.iter().rev() {
        let instr = graph.instr(id);
        span[id.index()] = graph
            .users(id)
            .iter()
            .filter(|&&u| same_frame(instr, graph.instr(u)))
            .map(|&u| span[u.index()] + 1)
            .max()
            .unwrap_or(0);
    }
    let mut layers: BTreeMap<u32, Vec<InstrId>> = BTreeMap::new();
    for id in graph.ids() {
        layers.entry(span[id.index()]).or_default().push(id);
    }
    let critical_path_length = span.iter().copied().max().unwrap_or(0);
    SpanMap {
        span,
        critical_path_length,
        layers,
    }
}

/// True for instructions fusion never crosses.
pub fn is_barrier(instr: &Instruction, fuse_dot: bool) -> bool {
    match instr.opcode {
        Opcode::LibraryCall => true,
        Opcode::BatchMatMul => !fuse_dot,
        _ => false,
    }
}

/// A fusable span interval. `layers` runs from the lower LC-layer (or 0)
/// inclusive up to the upper LC-layer (or past the top) exclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRegion {
    pub lower: Option<u32>,
    pub upper: Option<u32>,
    pub layers: Vec<u32>,
}

impl LayerRegion {
    /// Exclusive upper bound used as the subgraph-fusion roof.
    pub fn roof(&self, span_map: &SpanMap) -> u32 {
        self.upper
            .unwrap_or(span_map.critical_path_length() + 1)
    }
}

pub fn layers_between(span_map: &SpanMap, graph: &TensorGraph, fuse_dot: bool) -> Vec<LayerRegion> {
    let lc_layers: Vec<u32> = span_map
        .layers()
        .iter()
        .filter(|(_, ids)| ids.iter().any(|&i| is_barrier(graph.instr(i), fuse_dot)))
        .map(|(&l, _)| l)
        .collect();
    let top = span_map.critical_path_length() + 1;
    let mut bounds: Vec<Option<u32>> = vec![None];
    bounds.extend(lc_layers.iter().map(|&l| Some(l)));
    bounds.push(None);
    let mut regions = Vec::new();
    for pair in bounds.windows(2) {
        let (lower, upper) = (pair[0], pair[1]);
        let start = lower.unwrap_or(0);
        let end = upper.unwrap_or(top);
        if start >= end {
            continue;
        }
        regions.push(LayerRegion {
            lower,
            upper,
            layers: (start..end).collect(),
        });
    }
    regions
}
