//! Seeded random graph generation for property tests and `verify`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{ElementwiseKind, GraphBuilder, Reducer, Shape, TensorGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomGraphConfig {
    pub max_ops: usize,
    pub max_extent: usize,
    pub max_elements: usize,
    pub max_rank: usize,
    /// Let instructions switch between two frames.
    pub frames: bool,
    pub library_calls: bool,
    pub batch_matmul: bool,
}

impl Default for RandomGraphConfig {
    fn default() -> Self {
        RandomGraphConfig {
            max_ops: 25,
            max_extent: 32,
            max_elements: 2048,
            max_rank: 4,
            frames: false,
            library_calls: true,
            batch_matmul: true,
        }
    }
}

impl RandomGraphConfig {
    pub fn elementwise_only() -> Self {
        RandomGraphConfig {
            library_calls: false,
            batch_matmul: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Elementwise,
    Reshape,
    Bitcast,
    Transpose,
    Broadcast,
    Reduce,
    BatchMatMul,
    LibraryCall,
}

struct Gen<'c> {
    rng: ChaCha8Rng,
    cfg: &'c RandomGraphConfig,
    b: GraphBuilder,
    /// Non-input values that may feed later ops.
    pool: Vec<(String, Shape)>,
    next_input: usize,
    next_op: usize,
    frame: Option<&'static str>,
}

const EXTENTS: [usize; 9] = [1, 2, 3, 4, 5, 6, 8, 16, 32];

impl Gen<'_> {
    fn random_shape(&mut self, min_rank: usize) -> Shape {
        loop {
            let rank = self.rng.gen_range(min_rank.max(1)..=self.cfg.max_rank.min(3).max(min_rank));
            let dims: Vec<usize> = (0..rank)
                .map(|_| *EXTENTS.choose(&mut self.rng).expect("non-empty"))
                .filter(|&e| e <= self.cfg.max_extent)
                .collect();
            if dims.len() == rank && dims.iter().product::<usize>() <= self.cfg.max_elements {
                return Shape::f32(&dims);
            }
        }
    }

    fn fresh_input(&mut self, shape: &Shape) -> String {
        let name = format!("in{}", self.next_input);
        self.next_input += 1;
        let frame = self.frame;
        self.b.frame(frame);
        if self.rng.gen_bool(0.2) {
            let value = f64::from(self.rng.gen_range(-4i32..=4)) * 0.25;
            self.b.constant(&name, value, shape.clone())
        } else {
            self.b.parameter(&name, shape.clone())
        }
    }

    fn op_name(&mut self, prefix: &str) -> String {
        let n = format!("{prefix}{}", self.next_op);
        self.next_op += 1;
        n
    }

    /// An existing value of exactly `shape`, or a new input.
    fn value_of_shape(&mut self, shape: &Shape) -> String {
        let matches: Vec<String> = self
            .pool
            .iter()
            .filter(|(_, s)| s == shape)
            .map(|(n, _)| n.clone())
            .collect();
        if !matches.is_empty() && self.rng.gen_bool(0.5) {
            return matches.choose(&mut self.rng).expect("non-empty").clone();
        }
        self.fresh_input(shape)
    }

    /// A pool value biased toward recent ones, filtered by `keep`.
    fn pick(&mut self, keep: impl Fn(&Shape) -> bool) -> Option<(String, Shape)> {
        let ok: Vec<usize> = (0..self.pool.len()).filter(|&i| keep(&self.pool[i].1)).collect();
        if ok.is_empty() {
            return None;
        }
        let k = ok.len();
        let lo = k.saturating_sub(4);
        let i = if self.rng.gen_bool(0.7) {
            ok[self.rng.gen_range(lo..k)]
        } else {
            ok[self.rng.gen_range(0..k)]
        };
        Some(self.pool[i].clone())
    }

    fn operand(&mut self, keep: impl Fn(&Shape) -> bool + Copy, min_rank: usize) -> (String, Shape) {
        if !self.pool.is_empty() && self.rng.gen_bool(0.85) {
            if let Some(v) = self.pick(keep) {
                return v;
            }
        }
        loop {
            let s = self.random_shape(min_rank);
            if keep(&s) {
                let n = self.fresh_input(&s);
                return (n, s);
            }
        }
    }

    fn step(&mut self) {
        if self.cfg.frames && self.rng.gen_bool(0.15) {
            self.frame = if self.frame.is_none() { Some("loop") } else { None };
        }
        let mut kinds = vec![
            (OpKind::Elementwise, 10),
            (OpKind::Reshape, 1),
            (OpKind::Bitcast, 1),
            (OpKind::Transpose, 2),
            (OpKind::Broadcast, 2),
            (OpKind::Reduce, 3),
        ];
        if self.cfg.batch_matmul {
            kinds.push((OpKind::BatchMatMul, 1));
        }
        if self.cfg.library_calls {
            kinds.push((OpKind::LibraryCall, 1));
        }
        let kind = kinds.choose_weighted(&mut self.rng, |k| k.1).expect("weights").0;
        let max_elements = self.cfg.max_elements;
        let max_rank = self.cfg.max_rank;
        let produced = match kind {
            OpKind::Elementwise => {
                let ek = *ElementwiseKind::ALL.choose(&mut self.rng).expect("non-empty");
                let (a, shape) = self.operand(|_| true, 1);
                let mut operands = vec![a];
                for _ in 1..ek.arity() {
                    operands.push(self.value_of_shape(&shape));
                }
                let refs: Vec<&str> = operands.iter().map(String::as_str).collect();
                let name = self.op_name("ew");
                self.b.frame(self.frame);
                self.b.elementwise(&name, ek, &refs);
                Some((name, shape))
            }
            OpKind::Reshape | OpKind::Bitcast => {
                let (a, shape) = self.operand(|s| s.rank() >= 1, 1);
                let dims = self.reshape_target(&shape.dims);
                let name = self.op_name(if kind == OpKind::Reshape { "rs" } else { "bc" });
                self.b.frame(self.frame);
                if kind == OpKind::Reshape {
                    self.b.reshape(&name, &a, &dims);
                } else {
                    self.b.bitcast(&name, &a, &dims);
                }
                Some((name, Shape::f32(&dims)))
            }
            OpKind::Transpose => {
                let (a, shape) = self.operand(|s| s.rank() >= 2, 2);
                let mut perm: Vec<usize> = (0..shape.rank()).collect();
                perm.shuffle(&mut self.rng);
                let dims: Vec<usize> = perm.iter().map(|&p| shape.dims[p]).collect();
                let name = self.op_name("tr");
                self.b.frame(self.frame);
                self.b.transpose(&name, &a, &perm);
                Some((name, Shape::f32(&dims)))
            }
            OpKind::Broadcast => {
                let (a, shape) = self.operand(
                    |s| s.rank() < max_rank && s.element_count() * 2 <= max_elements,
                    1,
                );
                if shape.rank() >= max_rank || shape.element_count() * 2 > max_elements {
                    None
                } else {
                    let budget = max_elements / shape.element_count();
                    let extents: Vec<usize> = EXTENTS.iter().copied().filter(|&e| e <= budget).collect();
                    let e = *extents.choose(&mut self.rng).expect("1 always fits");
                    let pos = self.rng.gen_range(0..=shape.rank());
                    let mut dims = shape.dims.clone();
                    dims.insert(pos, e);
                    let dim_map: Vec<usize> = (0..shape.rank()).map(|i| if i < pos { i } else { i + 1 }).collect();
                    let name = self.op_name("br");
                    self.b.frame(self.frame);
                    self.b.broadcast(&name, &a, &dims, &dim_map);
                    Some((name, Shape::f32(&dims)))
                }
            }
            OpKind::Reduce => {
                let (a, shape) = self.operand(|s| s.rank() >= 1, 1);
                let mut dims: Vec<usize> = (0..shape.rank()).filter(|_| self.rng.gen_bool(0.4)).collect();
                if dims.is_empty() {
                    dims.push(self.rng.gen_range(0..shape.rank()));
                }
                let reducer = *[Reducer::Sum, Reducer::Sum, Reducer::Max, Reducer::Min]
                    .choose(&mut self.rng)
                    .expect("non-empty");
                let out: Vec<usize> = (0..shape.rank())
                    .filter(|d| !dims.contains(d))
                    .map(|d| shape.dims[d])
                    .collect();
                let name = self.op_name("rd");
                self.b.frame(self.frame);
                self.b.reduce(&name, &a, &dims, reducer);
                Some((name, Shape::f32(&out)))
            }
            OpKind::BatchMatMul | OpKind::LibraryCall => {
                let (a, shape) = self.operand(|s| s.rank() >= 3 && s.rank() <= 3, 3);
                if shape.rank() != 3 {
                    None
                } else {
                    let (batch, m, k) = (shape.dims[0], shape.dims[1], shape.dims[2]);
                    let fits: Vec<usize> = [1usize, 2, 4, 8]
                        .into_iter()
                        .filter(|&n| batch * m * n <= max_elements && batch * k * n <= max_elements)
                        .collect();
                    let n = *fits.choose(&mut self.rng).expect("1 fits");
                    if batch * m * n > max_elements || batch * k * n > max_elements {
                        None
                    } else {
                        let rhs = self.value_of_shape(&Shape::f32(&[batch, k, n]));
                        let name = self.op_name(if kind == OpKind::BatchMatMul { "dot" } else { "lc" });
                        self.b.frame(self.frame);
                        if kind == OpKind::BatchMatMul {
                            self.b.batch_matmul(&name, &a, &rhs);
                        } else {
                            self.b.library_call(&name, &a, &rhs);
                        }
                        Some((name, Shape::f32(&[batch, m, n])))
                    }
                }
            }
        };
        if let Some(v) = produced {
            self.pool.push(v);
        }
    }

    fn reshape_target(&mut self, dims: &[usize]) -> Vec<usize> {
        let mut dims = dims.to_vec();
        let can_merge = (0..dims.len().saturating_sub(1)).any(|i| dims[i] * dims[i + 1] <= self.cfg.max_extent);
        if can_merge && (dims.len() >= self.cfg.max_rank || self.rng.gen_bool(0.5)) {
            let ok: Vec<usize> = (0..dims.len() - 1)
                .filter(|&i| dims[i] * dims[i + 1] <= self.cfg.max_extent)
                .collect();
            let i = *ok.choose(&mut self.rng).expect("can_merge");
            let merged = dims[i] * dims[i + 1];
            dims.splice(i..i + 2, [merged]);
        } else if dims.len() < self.cfg.max_rank {
            let i = self.rng.gen_range(0..dims.len());
            let e = dims[i];
            let factors: Vec<usize> = (1..=e).filter(|f| e % f == 0).collect();
            let f = *factors.choose(&mut self.rng).expect("1 divides");
            dims.splice(i..i + 1, [f, e / f]);
        }
        dims
    }
}

pub fn random_graph(seed: u64, cfg: &RandomGraphConfig) -> TensorGraph {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
        b: GraphBuilder::new(),
        pool: Vec::new(),
        next_input: 0,
        next_op: 0,
        frame: None,
    };
    let target = g.rng.gen_range(1..=cfg.max_ops);
    while g.pool.len() < target {
        g.step();
    }
    let mut b = g.b;
    for (name, _) in &g.pool {
        if !b.has_users(name) {
            b.output(name);
        }
    }
    b.build().expect("generated graphs are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let cfg = RandomGraphConfig::default();
        for seed in 0..50 {
            let a = random_graph(seed, &cfg);
            let b = random_graph(seed, &cfg);
            assert_eq!(a.len(), b.len());
            let ops = a.ids().filter(|&i| !a.instr(i).opcode.is_input()).count();
            assert!((1..=25).contains(&ops), "seed {seed}: {ops} ops");
            for i in a.ids() {
                let s = &a.instr(i).shape;
                assert!(s.element_count() <= cfg.max_elements);
                assert!(s.dims.iter().all(|&d| d <= cfg.max_extent));
            }
        }
    }

    #[test]
    fn frames_appear() {
        let cfg = RandomGraphConfig {
            frames: true,
            ..RandomGraphConfig::default()
        };
        let framed = (0..50).any(|s| {
            let g = random_graph(s, &cfg);
            let any = g.instructions().iter().any(|i| i.frame_id.is_some());
            any
        });
        assert!(framed);
    }
}
