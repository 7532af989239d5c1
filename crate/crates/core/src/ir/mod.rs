//! HLO-like tensor graph: shapes, opcodes, instructions and the validated
//! [`TensorGraph`] every other pass consumes.
//!
//! Instructions are addressed by [`InstrId`], a dense index assigned in
//! declaration order. "Id order" everywhere in the compiler means this
//! declaration order, which keeps every pass deterministic.

mod json;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

pub use json::{parse_graph, parse_graph_with, serialize_graph};

use crate::error::IrError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    I32,
}

impl DType {
    pub fn element_size(self) -> usize {
        4
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I32 => "i32",
        }
    }

    /// Rounds a host value to what the element type can hold.
    pub fn canonicalize(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::I32 => x as i32 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape {
    pub dims: Vec<usize>,
    pub dtype: DType,
}

impl Shape {
    pub fn new(dims: Vec<usize>, dtype: DType) -> Self {
        Shape { dims, dtype }
    }

    pub fn f32(dims: &[usize]) -> Self {
        Shape::new(dims.to_vec(), DType::F32)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn byte_size(&self) -> usize {
        self.element_count() * self.dtype.element_size()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.rank()];
        for d in (0..self.rank().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.dims[d + 1];
        }
        strides
    }

    pub fn linear_index(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn multi_index(&self, mut linear: usize) -> Vec<usize> {
        let mut index = vec![0; self.rank()];
        for d in (0..self.rank()).rev() {
            index[d] = linear % self.dims[d];
            linear /= self.dims[d];
        }
        index
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}[{}]", self.dtype.name(), dims.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Max,
    Min,
    Neg,
    /// Greater-than; yields 1 or 0 in the operand type.
    Compare,
    /// `select(pred, on_true, on_false)` with `pred != 0` as the condition.
    Select,
    Exp,
    Log,
    Divide,
    Power,
    Tanh,
    Sqrt,
    Rsqrt,
}

impl ElementwiseKind {
    pub const ALL: [ElementwiseKind; 15] = [
        ElementwiseKind::Add,
        ElementwiseKind::Sub,
        ElementwiseKind::Mul,
        ElementwiseKind::Max,
        ElementwiseKind::Min,
        ElementwiseKind::Neg,
        ElementwiseKind::Compare,
        ElementwiseKind::Select,
        ElementwiseKind::Exp,
        ElementwiseKind::Log,
        ElementwiseKind::Divide,
        ElementwiseKind::Power,
        ElementwiseKind::Tanh,
        ElementwiseKind::Sqrt,
        ElementwiseKind::Rsqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ElementwiseKind::Add => "add",
            ElementwiseKind::Sub => "sub",
            ElementwiseKind::Mul => "mul",
            ElementwiseKind::Max => "max",
            ElementwiseKind::Min => "min",
            ElementwiseKind::Neg => "neg",
            ElementwiseKind::Compare => "compare",
            ElementwiseKind::Select => "select",
            ElementwiseKind::Exp => "exp",
            ElementwiseKind::Log => "log",
            ElementwiseKind::Divide => "divide",
            ElementwiseKind::Power => "power",
            ElementwiseKind::Tanh => "tanh",
            ElementwiseKind::Sqrt => "sqrt",
            ElementwiseKind::Rsqrt => "rsqrt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            ElementwiseKind::Neg
            | ElementwiseKind::Exp
            | ElementwiseKind::Log
            | ElementwiseKind::Tanh
            | ElementwiseKind::Sqrt
            | ElementwiseKind::Rsqrt => 1,
            ElementwiseKind::Select => 3,
            _ => 2,
        }
    }

    pub fn expensive_by_default(self) -> bool {
        matches!(
            self,
            ElementwiseKind::Exp
                | ElementwiseKind::Log
                | ElementwiseKind::Divide
                | ElementwiseKind::Power
                | ElementwiseKind::Tanh
                | ElementwiseKind::Sqrt
                | ElementwiseKind::Rsqrt
        )
    }

    /// Scalar semantics shared by the interpreter and the block simulator.
    pub fn apply(self, args: &[f64]) -> f64 {
        match self {
            ElementwiseKind::Add => args[0] + args[1],
            ElementwiseKind::Sub => args[0] - args[1],
            ElementwiseKind::Mul => args[0] * args[1],
            ElementwiseKind::Max => args[0].max(args[1]),
            ElementwiseKind::Min => args[0].min(args[1]),
            ElementwiseKind::Neg => -args[0],
            ElementwiseKind::Compare => {
                if args[0] > args[1] {
                    1.0
                } else {
                    0.0
                }
            }
            ElementwiseKind::Select => {
                if args[0] != 0.0 {
                    args[1]
                } else {
                    args[2]
                }
            }
            ElementwiseKind::Exp => args[0].exp(),
            ElementwiseKind::Log => args[0].ln(),
            ElementwiseKind::Divide => args[0] / args[1],
            ElementwiseKind::Power => args[0].powf(args[1]),
            ElementwiseKind::Tanh => args[0].tanh(),
            ElementwiseKind::Sqrt => args[0].sqrt(),
            ElementwiseKind::Rsqrt => 1.0 / args[0].sqrt(),
        }
    }
}

/// The set of elementwise kinds treated as expensive by planning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpensiveKinds(pub BTreeSet<ElementwiseKind>);

impl Default for ExpensiveKinds {
    fn default() -> Self {
        ExpensiveKinds(
            ElementwiseKind::ALL
                .iter()
                .copied()
                .filter(|k| k.expensive_by_default())
                .collect(),
        )
    }
}

impl ExpensiveKinds {
    pub fn contains(&self, kind: ElementwiseKind) -> bool {
        self.0.contains(&kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reducer {
    Sum,
    Max,
    Min,
}

impl Reducer {
    pub fn name(self) -> &'static str {
        match self {
            Reducer::Sum => "sum",
            Reducer::Max => "max",
            Reducer::Min => "min",
        }
    }

    pub fn init(self) -> f64 {
        match self {
            Reducer::Sum => 0.0,
            Reducer::Max => f64::NEG_INFINITY,
            Reducer::Min => f64::INFINITY,
        }
    }

    pub fn combine(self, acc: f64, x: f64) -> f64 {
        match self {
            Reducer::Sum => acc + x,
            Reducer::Max => acc.max(x),
            Reducer::Min => acc.min(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Opcode {
    Parameter,
    /// A tensor filled with one value.
    Constant { value: f64 },
    Elementwise { kind: ElementwiseKind, expensive: bool },
    Reshape,
    Bitcast,
    /// Output dim `k` is input dim `permutation[k]`.
    Transpose { permutation: Vec<usize> },
    /// Input dim `i` becomes output dim `dim_map[i]`.
    Broadcast { dim_map: Vec<usize> },
    Reduce { reduce_dims: Vec<usize>, reducer: Reducer },
    BatchMatMul,
    /// Opaque vendor-library matmul; a fusion barrier.
    LibraryCall,
}

impl Opcode {
    pub fn name(&self) -> &'static str {
        match self {
            Opcode::Parameter => "parameter",
            Opcode::Constant { .. } => "constant",
            Opcode::Elementwise { kind, .. } => kind.name(),
            Opcode::Reshape => "reshape",
            Opcode::Bitcast => "bitcast",
            Opcode::Transpose { .. } => "transpose",
            Opcode::Broadcast { .. } => "broadcast",
            Opcode::Reduce { .. } => "reduce",
            Opcode::BatchMatMul => "batch_matmul",
            Opcode::LibraryCall => "library_call",
        }
    }

    pub fn is_input(&self) -> bool {
        matches!(self, Opcode::Parameter | Opcode::Constant { .. })
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, Opcode::Elementwise { .. })
    }

    pub fn is_expensive_elementwise(&self) -> bool {
        matches!(self, Opcode::Elementwise { expensive: true, .. })
    }

    pub fn is_cheap_elementwise(&self) -> bool {
        matches!(self, Opcode::Elementwise { expensive: false, .. })
    }

    /// Reshape, Bitcast, Transpose and Broadcast.
    pub fn is_shape_modulation(&self) -> bool {
        matches!(
            self,
            Opcode::Reshape | Opcode::Bitcast | Opcode::Transpose { .. } | Opcode::Broadcast { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstrId(pub u32);

impl InstrId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub id: InstrId,
    pub name: String,
    pub opcode: Opcode,
    pub operands: Vec<InstrId>,
    pub shape: Shape,
    pub frame_id: Option<String>,
}

/// Unvalidated instruction description used to build a [`TensorGraph`].
#[derive(Debug, Clone)]
pub struct InstrSpec {
    pub name: String,
    pub opcode: Opcode,
    pub operands: Vec<String>,
    pub shape: Shape,
    pub frame_id: Option<String>,
}

/// Validated, immutable DAG of tensor instructions.
#[derive(Debug, Clone)]
pub struct TensorGraph {
    instructions: Vec<Instruction>,
    outputs: Vec<InstrId>,
    users: Vec<Vec<InstrId>>,
    by_name: HashMap<String, InstrId>,
}

impl TensorGraph {
    /// Builds and validates a graph. Specs may be listed in any order.
    pub fn new(specs: Vec<InstrSpec>, outputs: Vec<String>) -> Result<Self, IrError> {
        let mut by_name = HashMap::new();
        for (i, spec) in specs.iter().enumerate() {
            if by_name.insert(spec.name.clone(), InstrId(i as u32)).is_some() {
                return Err(IrError::semantic(&spec.name, "duplicate instruction id"));
            }
        }
        let mut instructions = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let mut operands = Vec::with_capacity(spec.operands.len());
            for op in &spec.operands {
                let id = by_name.get(op).copied().ok_or_else(|| {
                    IrError::semantic(&spec.name, format!("unknown operand `{op}`"))
                })?;
                operands.push(id);
            }
            instructions.push(Instruction {
                id: InstrId(i as u32),
                name: spec.name,
                opcode: spec.opcode,
                operands,
                shape: spec.shape,
                frame_id: spec.frame_id,
            });
        }
        let mut out_ids = Vec::with_capacity(outputs.len());
        for name in &outputs {
            let id = by_name
                .get(name)
                .copied()
                .ok_or_else(|| IrError::semantic(name, "unknown output id"))?;
            if out_ids.contains(&id) {
                return Err(IrError::semantic(name, "output listed twice"));
            }
            out_ids.push(id);
        }
        let mut users = vec![Vec::new(); instructions.len()];
        for instr in &instructions {
            let mut seen = BTreeSet::new();
            for &op in &instr.operands {
                if seen.insert(op) {
                    users[op.index()].push(instr.id);
                }
            }
        }
        let graph = TensorGraph {
            instructions,
            outputs: out_ids,
            users,
            by_name,
        };
        graph.check_acyclic()?;
        for instr in &graph.instructions {
            validate_instruction(&graph, instr)?;
        }
        for instr in &graph.instructions {
            let is_output = graph.outputs.contains(&instr.id);
            let used = !graph.users[instr.id.index()].is_empty();
            if is_output && used {
                return Err(IrError::semantic(&instr.name, "output instruction has users"));
            }
            if !is_output && !used {
                return Err(IrError::semantic(
                    &instr.name,
                    "instruction has no users and is not an output",
                ));
            }
        }
        if graph.outputs.is_empty() {
            return Err(IrError::semantic("<graph>", "graph has no outputs"));
        }
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn instr(&self, id: InstrId) -> &Instruction {
        &self.instructions[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = InstrId> + '_ {
        (0..self.instructions.len() as u32).map(InstrId)
    }

    pub fn outputs(&self) -> &[InstrId] {
        &self.outputs
    }

    pub fn is_output(&self, id: InstrId) -> bool {
        self.outputs.contains(&id)
    }

    pub fn id_of(&self, name: &str) -> Option<InstrId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: InstrId) -> &str {
        &self.instr(id).name
    }

    /// Users in id order; each user listed once even if it reads the value twice.
    pub fn users(&self, id: InstrId) -> &[InstrId] {
        &self.users[id.index()]
    }

    pub fn users_of(&self, name: &str) -> Result<BTreeSet<String>, IrError> {
        let id = self
            .id_of(name)
            .ok_or_else(|| IrError::UnknownInstruction(name.to_string()))?;
        Ok(self
            .users(id)
            .iter()
            .map(|&u| self.name(u).to_string())
            .collect())
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Instruction> {
        self.instructions
            .iter()
            .filter(|i| i.opcode == Opcode::Parameter)
    }

    /// Kahn order, ties by id.
    pub fn topological_order(&self) -> Vec<InstrId> {
        let mut indegree: Vec<usize> = self
            .instructions
            .iter()
            .map(|i| i.operands.iter().collect::<BTreeSet<_>>().len())
            .collect();
        let mut ready: BTreeSet<InstrId> = self
            .ids()
            .filter(|id| indegree[id.index()] == 0)
            .collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &u in self.users(id) {
                indegree[u.index()] -= 1;
                if indegree[u.index()] == 0 {
                    ready.insert(u);
                }
            }
        }
        order
    }

    fn check_acyclic(&self) -> Result<(), IrError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; self.len()];
        for start in self.ids() {
            if state[start.index()] != 0 {
                continue;
            }
            let mut stack: Vec<(InstrId, usize)> = vec![(start, 0)];
            state[start.index()] = 1;
            while let Some(&mut (id, ref mut next)) = stack.last_mut() {
                let operands = &self.instr(id).operands;
                if *next < operands.len() {
                    let op = operands[*next];
                    *next += 1;
                    match state[op.index()] {
                        0 => {
                            state[op.index()] = 1;
                            stack.push((op, 0));
                        }
                        1 => {
                            let pos = stack.iter().position(|&(s, _)| s == op).unwrap();
                            let mut ids: Vec<String> = stack[pos..]
                                .iter()
                                .map(|&(s, _)| self.name(s).to_string())
                                .collect();
                            ids.sort();
                            return Err(IrError::Cycle { ids });
                        }
                        _ => {}
                    }
                } else {
                    state[id.index()] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }
}

fn validate_instruction(graph: &TensorGraph, instr: &Instruction) -> Result<(), IrError> {
    let name = &instr.name;
    let shape = &instr.shape;
    if shape.dims.contains(&0) {
        return Err(IrError::semantic(name, "dimension extents must be >= 1"));
    }
    let operand_shapes: Vec<&Shape> = instr
        .operands
        .iter()
        .map(|&o| &graph.instr(o).shape)
        .collect();
    let expect_arity = |n: usize| -> Result<(), IrError> {
        if operand_shapes.len() != n {
            Err(IrError::semantic(
                name,
                format!("expected {n} operands, found {}", operand_shapes.len()),
            ))
        } else {
            Ok(())
        }
    };
    match &instr.opcode {
        Opcode::Parameter | Opcode::Constant { .. } => expect_arity(0)?,
        Opcode::Elementwise { kind, .. } => {
            expect_arity(kind.arity())?;
            for s in &operand_shapes {
                if *s != shape {
                    return Err(IrError::semantic(
                        name,
                        format!("elementwise operand shape {s} differs from output {shape}"),
                    ));
                }
            }
        }
        Opcode::Reshape | Opcode::Bitcast => {
            expect_arity(1)?;
            let input = operand_shapes[0];
            if input.element_count() != shape.element_count() || input.dtype != shape.dtype {
                return Err(IrError::semantic(
                    name,
                    format!("cannot reshape {input} into {shape}"),
                ));
            }
        }
        Opcode::Transpose { permutation } => {
            expect_arity(1)?;
            let input = operand_shapes[0];
            let rank = input.rank();
            let mut seen = vec![false; rank];
            let bijective = permutation.len() == rank
                && permutation.iter().all(|&p| {
                    p < rank && !std::mem::replace(&mut seen[p], true)
                });
            if !bijective {
                return Err(IrError::semantic(name, "permutation not bijective"));
            }
            let expected: Vec<usize> = permutation.iter().map(|&p| input.dims[p]).collect();
            if expected != shape.dims || input.dtype != shape.dtype {
                return Err(IrError::semantic(name, "transpose output shape mismatch"));
            }
        }
        Opcode::Broadcast { dim_map } => {
            expect_arity(1)?;
            let input = operand_shapes[0];
            if dim_map.len() != input.rank() {
                return Err(IrError::semantic(
                    name,
                    "broadcast_dim_map must list one output dim per input dim",
                ));
            }
            if dim_map.windows(2).any(|w| w[0] >= w[1])
                || dim_map.iter().any(|&d| d >= shape.rank())
            {
                return Err(IrError::semantic(
                    name,
                    "broadcast_dim_map must be strictly increasing and in range",
                ));
            }
            for (i, &d) in dim_map.iter().enumerate() {
                if input.dims[i] != shape.dims[d] {
                    return Err(IrError::semantic(name, "broadcast extent mismatch"));
                }
            }
            if input.dtype != shape.dtype {
                return Err(IrError::semantic(name, "broadcast dtype mismatch"));
            }
        }
        Opcode::Reduce { reduce_dims, .. } => {
            expect_arity(1)?;
            let input = operand_shapes[0];
            let distinct: BTreeSet<usize> = reduce_dims.iter().copied().collect();
            if reduce_dims.is_empty()
                || distinct.len() != reduce_dims.len()
                || reduce_dims.iter().any(|&d| d >= input.rank())
            {
                return Err(IrError::semantic(
                    name,
                    "reduce_dims must be distinct, non-empty and within the input rank",
                ));
            }
            let kept: Vec<usize> = (0..input.rank())
                .filter(|d| !distinct.contains(d))
                .map(|d| input.dims[d])
                .collect();
            if kept != shape.dims || input.dtype != shape.dtype {
                return Err(IrError::semantic(name, "reduce output shape mismatch"));
            }
        }
        Opcode::BatchMatMul | Opcode::LibraryCall => {
            expect_arity(2)?;
            let (a, b) = (operand_shapes[0], operand_shapes[1]);
            let min_rank = if instr.opcode == Opcode::BatchMatMul { 3 } else { 2 };
            if a.rank() < min_rank || a.rank() != b.rank() || shape.rank() != a.rank() {
                return Err(IrError::semantic(
                    name,
                    format!("matmul operands must have equal rank >= {min_rank}"),
                ));
            }
            let r = a.rank();
            let expected: Vec<usize> = a.dims[..r - 2]
                .iter()
                .copied()
                .chain([a.dims[r - 2], b.dims[r - 1]])
                .collect();
            if a.dims[..r - 2] != b.dims[..r - 2] {
                return Err(IrError::semantic(name, "batch dims differ"));
            }
            if a.dims[r - 1] != b.dims[r - 2] {
                return Err(IrError::semantic(name, "contraction extents differ"));
            }
            if expected != shape.dims || a.dtype != shape.dtype || b.dtype != shape.dtype {
                return Err(IrError::semantic(name, "matmul output shape mismatch"));
            }
        }
    }
    Ok(())
}

/// Convenience builder used by fixtures, generators and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    specs: Vec<InstrSpec>,
    outputs: Vec<String>,
    frame: Option<String>,
    expensive: ExpensiveKinds,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Subsequent instructions are tagged with this frame.
    pub fn frame(&mut self, frame: Option<&str>) -> &mut Self {
        self.frame = frame.map(str::to_string);
        self
    }

    pub fn shape_of(&self, name: &str) -> Shape {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.shape.clone())
            .unwrap_or_else(|| panic!("unknown instruction {name}"))
    }

    pub fn push(&mut self, name: &str, opcode: Opcode, operands: &[&str], shape: Shape) -> String {
        self.specs.push(InstrSpec {
            name: name.to_string(),
            opcode,
            operands: operands.iter().map(|s| s.to_string()).collect(),
            shape,
            frame_id: self.frame.clone(),
        });
        name.to_string()
    }

    pub fn parameter(&mut self, name: &str, shape: Shape) -> String {
        self.push(name, Opcode::Parameter, &[], shape)
    }

    pub fn constant(&mut self, name: &str, value: f64, shape: Shape) -> String {
        self.push(name, Opcode::Constant { value }, &[], shape)
    }

    pub fn elementwise(&mut self, name: &str, kind: ElementwiseKind, operands: &[&str]) -> String {
        let shape = self.shape_of(operands[0]);
        let expensive = self.expensive.contains(kind);
        self.push(name, Opcode::Elementwise { kind, expensive }, operands, shape)
    }

    pub fn reshape(&mut self, name: &str, operand: &str, dims: &[usize]) -> String {
        let dtype = self.shape_of(operand).dtype;
        self.push(name, Opcode::Reshape, &[operand], Shape::new(dims.to_vec(), dtype))
    }

    pub fn bitcast(&mut self, name: &str, operand: &str, dims: &[usize]) -> String {
        let dtype = self.shape_of(operand).dtype;
        self.push(name, Opcode::Bitcast, &[operand], Shape::new(dims.to_vec(), dtype))
    }

    pub fn transpose(&mut self, name: &str, operand: &str, permutation: &[usize]) -> String {
        let input = self.shape_of(operand);
        let dims = permutation.iter().map(|&p| input.dims[p]).collect();
        self.push(
            name,
            Opcode::Transpose {
                permutation: permutation.to_vec(),
            },
            &[operand],
            Shape::new(dims, input.dtype),
        )
    }

    pub fn broadcast(&mut self, name: &str, operand: &str, dims: &[usize], dim_map: &[usize]) -> String {
        let dtype = self.shape_of(operand).dtype;
        self.push(
            name,
            Opcode::Broadcast {
                dim_map: dim_map.to_vec(),
            },
            &[operand],
            Shape::new(dims.to_vec(), dtype),
        )
    }

    pub fn reduce(&mut self, name: &str, operand: &str, reduce_dims: &[usize], reducer: Reducer) -> String {
        let input = self.shape_of(operand);
        let dims = (0..input.rank())
            .filter(|d| !reduce_dims.contains(d))
            .map(|d| input.dims[d])
            .collect();
        self.push(
            name,
            Opcode::Reduce {
                reduce_dims: reduce_dims.to_vec(),
                reducer,
            },
            &[operand],
            Shape::new(dims, input.dtype),
        )
    }

    fn matmul_shape(&self, a: &str, b: &str) -> Shape {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let r = sa.rank();
        let mut dims = sa.dims[..r - 2].to_vec();
        dims.push(sa.dims[r - 2]);
        dims.push(sb.dims[r - 1]);
        Shape::new(dims, sa.dtype)
    }

    pub fn batch_matmul(&mut self, name: &str, a: &str, b: &str) -> String {
        let shape = self.matmul_shape(a, b);
        self.push(name, Opcode::BatchMatMul, &[a, b], shape)
    }

    pub fn library_call(&mut self, name: &str, a: &str, b: &str) -> String {
        let shape = self.matmul_shape(a, b);
        self.push(name, Opcode::LibraryCall, &[a, b], shape)
    }

    /// True when some instruction added so far reads `name`.
    pub fn has_users(&self, name: &str) -> bool {
        self.specs.iter().any(|s| s.operands.iter().any(|o| o == name))
    }

    pub fn output(&mut self, name: &str) -> &mut Self {
        self.outputs.push(name.to_string());
        self
    }

    pub fn build(self) -> Result<TensorGraph, IrError> {
        TensorGraph::new(self.specs, self.outputs)
    }
}

/// Frame grouping, used by span analysis and fusion.
pub fn frames(graph: &TensorGraph) -> BTreeMap<Option<String>, Vec<InstrId>> {
    let mut map: BTreeMap<Option<String>, Vec<InstrId>> = BTreeMap::new();
    for instr in graph.instructions() {
        map.entry(instr.frame_id.clone()).or_default().push(instr.id);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond() -> TensorGraph {
        let mut b = GraphBuilder::new();
        b.parameter("a", Shape::f32(&[4]));
        b.elementwise("b", ElementwiseKind::Exp, &["a"]);
        b.elementwise("c", ElementwiseKind::Neg, &["a"]);
        b.elementwise("d", ElementwiseKind::Add, &["b", "c"]);
        b.output("d");
        b.build().unwrap()
    }

    #[test]
    fn users_of_diamond() {
        let g = diamond();
        let users = g.users_of("a").unwrap();
        assert_eq!(users, ["b", "c"].iter().map(|s| s.to_string()).collect());
        assert!(g.users_of("d").unwrap().is_empty());
        assert!(matches!(g.users_of("zzz"), Err(IrError::UnknownInstruction(_))));
    }

    #[test]
    fn users_of_chain() {
        let mut b = GraphBuilder::new();
        b.parameter("a", Shape::f32(&[2]));
        b.elementwise("b", ElementwiseKind::Exp, &["a"]);
        b.elementwise("c", ElementwiseKind::Exp, &["b"]);
        b.output("c");
        let g = b.build().unwrap();
        assert_eq!(g.users_of("b").unwrap().into_iter().collect::<Vec<_>>(), vec!["c"]);
    }

    #[test]
    fn rank_zero_shape() {
        let s = Shape::f32(&[]);
        assert_eq!(s.element_count(), 1);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.multi_index(0), Vec::<usize>::new());
    }

    #[test]
    fn index_roundtrip() {
        let s = Shape::f32(&[3, 4, 5]);
        for lin in 0..s.element_count() {
            assert_eq!(s.linear_index(&s.multi_index(lin)), lin);
        }
        assert_eq!(s.strides(), vec![20, 5, 1]);
    }

    #[test]
    fn unused_instruction_rejected() {
        let mut b = GraphBuilder::new();
        b.parameter("a", Shape::f32(&[2]));
        b.parameter("unused", Shape::f32(&[2]));
        b.elementwise("b", ElementwiseKind::Exp, &["a"]);
        b.output("b");
        let err = b.build().unwrap_err();
        assert!(err.to_string().contains("unused"));
    }

    #[test]
    fn bad_batch_matmul_rank() {
        let mut b = GraphBuilder::new();
        b.parameter("x", Shape::f32(&[4, 4]));
        b.parameter("y", Shape::f32(&[4, 4]));
        b.push("d", Opcode::BatchMatMul, &["x", "y"], Shape::f32(&[4, 4]));
        b.output("d");
        assert!(b.build().is_err());
    }

    #[test]
    fn topological_order_respects_edges() {
        let g = diamond();
        let order = g.topological_order();
        let pos = |n: &str| order.iter().position(|&i| g.name(i) == n).unwrap();
        assert!(pos("a") < pos("b") && pos("b") < pos("d") && pos("c") < pos("d"));
    }
}
