//! Bundled example graphs.

use crate::ir::{ElementwiseKind, GraphBuilder, Reducer, Shape, TensorGraph};

pub const NAMES: [&str; 4] = [
    "softmax_batchdot",
    "elementwise_chain",
    "reduce_transpose_mix",
    "library_call_split",
];

pub fn by_name(name: &str) -> Option<TensorGraph> {
    match name {
        "softmax_batchdot" => Some(softmax_batchdot()),
        "elementwise_chain" => Some(elementwise_chain(10)),
        "reduce_transpose_mix" => Some(reduce_transpose_mix()),
        "library_call_split" => Some(library_call_split()),
        _ => None,
    }
}

/// Scaled, masked exponentials normalized per batch and contracted with `v`.
pub fn softmax_batchdot() -> TensorGraph {
    let mut b = GraphBuilder::new();
    b.parameter("x", Shape::f32(&[4, 16, 32]));
    b.parameter("mask", Shape::f32(&[16, 32]));
    b.constant("scale", 0.125, Shape::f32(&[4, 16, 32]));
    b.parameter("v", Shape::f32(&[4, 16, 8]));
    b.elementwise("Multiply.1", ElementwiseKind::Mul, &["x", "scale"]);
    b.broadcast("Broadcast.2", "mask", &[4, 16, 32], &[1, 2]);
    b.elementwise("Add.1", ElementwiseKind::Add, &["Multiply.1", "Broadcast.2"]);
    b.elementwise("Exponential.1", ElementwiseKind::Exp, &["Add.1"]);
    b.reduce("Reduce.1", "Exponential.1", &[2], Reducer::Sum);
    b.reduce("Reduce.2", "Reduce.1", &[1], Reducer::Sum);
    b.broadcast("Broadcast.1", "Reduce.2", &[4, 16, 32], &[0]);
    b.elementwise("Divide.1", ElementwiseKind::Divide, &["Exponential.1", "Broadcast.1"]);
    b.bitcast("Bitcast.1", "Divide.1", &[4, 32, 16]);
    b.batch_matmul("Dot.1", "Bitcast.1", "v");
    b.output("Dot.1");
    b.build().expect("fixture is well formed")
}

/// `n` elementwise ops in a line over one [32, 32] input.
pub fn elementwise_chain(n: usize) -> TensorGraph {
    assert!(n >= 1);
    let kinds = [
        ElementwiseKind::Tanh,
        ElementwiseKind::Neg,
        ElementwiseKind::Add,
        ElementwiseKind::Exp,
        ElementwiseKind::Mul,
    ];
    let mut b = GraphBuilder::new();
    b.parameter("x", Shape::f32(&[32, 32]));
    let mut prev = "x".to_string();
    for i in 0..n {
        let kind = kinds[i % kinds.len()];
        let name = format!("op{i}");
        if kind.arity() == 1 {
            b.elementwise(&name, kind, &[&prev]);
        } else {
            b.elementwise(&name, kind, &[&prev, "x"]);
        }
        prev = name;
    }
    b.output(&prev);
    b.build().expect("fixture is well formed")
}

/// Row normalization behind a transpose, with a second output.
pub fn reduce_transpose_mix() -> TensorGraph {
    let mut b = GraphBuilder::new();
    b.parameter("x", Shape::f32(&[8, 16, 32]));
    b.transpose("t", "x", &[0, 2, 1]);
    b.elementwise("e", ElementwiseKind::Exp, &["t"]);
    b.reduce("m", "e", &[2], Reducer::Max);
    b.broadcast("mb", "m", &[8, 32, 16], &[0, 1]);
    b.elementwise("d", ElementwiseKind::Sub, &["e", "mb"]);
    b.elementwise("o", ElementwiseKind::Tanh, &["d"]);
    b.reduce("s", "d", &[1, 2], Reducer::Sum);
    b.output("o").output("s");
    b.build().expect("fixture is well formed")
}

/// Elementwise work on both sides of a vendor matmul.
pub fn library_call_split() -> TensorGraph {
    let mut b = GraphBuilder::new();
    b.parameter("a", Shape::f32(&[2, 16, 16]));
    b.parameter("w", Shape::f32(&[2, 16, 16]));
    b.elementwise("pre", ElementwiseKind::Tanh, &["a"]);
    b.elementwise("pre2", ElementwiseKind::Mul, &["pre", "a"]);
    b.library_call("mm", "pre2", "w");
    b.elementwise("post", ElementwiseKind::Exp, &["mm"]);
    b.elementwise("out", ElementwiseKind::Add, &["post", "mm"]);
    b.output("out");
    b.build().expect("fixture is well formed")
}
