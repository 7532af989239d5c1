//! The end-to-end driver: span, fusion, tuning, shared-memory planning with
//! feedback into fusion, emission, and whole-graph execution of the result.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{
    check_input, evaluate_dense, interpret, max_relative_error, random_inputs, run_program, ExecutionTrace,
    TensorValue,
};
use crate::fusion::{fuse_module_with_span, FusedComputation, FusionOptions, FusionPlan, DEFAULT_FOOTPRINT_LIMIT};
use crate::ir::{InstrId, Opcode, TensorGraph};
use crate::kernelgen::{emit, KernelProgram};
use crate::smem::{plan_shared_memory, SharedMemPlan, SmemOutcome, DEFAULT_SMEM_LIMIT};
use crate::span::{compute_span, SpanMap};
use crate::tuning::{tune, CostModelParams, PerfLibrary, TuneOptions, TuneResult};

#[derive(Debug, Clone, PartialEq)]
pub struct CompileOptions {
    pub fuse_dot: bool,
    pub footprint_limit: usize,
    pub smem_limit: usize,
    pub cost_params: CostModelParams,
    pub tune: TuneOptions,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            fuse_dot: false,
            footprint_limit: DEFAULT_FOOTPRINT_LIMIT,
            smem_limit: DEFAULT_SMEM_LIMIT,
            cost_params: CostModelParams::default(),
            tune: TuneOptions::default(),
        }
    }
}

impl CompileOptions {
    pub fn with_dot_fusion(mut self, on: bool) -> Self {
        self.fuse_dot = on;
        self
    }
}

#[derive(Debug, Clone)]
pub struct CompiledKernel {
    pub computation: FusedComputation,
    pub tune: TuneResult,
    pub smem: SharedMemPlan,
    pub program: KernelProgram,
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub span: SpanMap,
    pub plan: FusionPlan,
    /// One per entry of `plan.computations`, same order.
    pub kernels: Vec<CompiledKernel>,
    /// Members shared-memory planning pushed out of fused producers.
    pub vetoed: BTreeSet<InstrId>,
    pub feedback_rounds: usize,
}

/// Members of `computation` on its highest occupied layer, roots excluded.
fn highest_layer(computation: &FusedComputation, span: &SpanMap) -> BTreeSet<InstrId> {
    let top = computation
        .members
        .iter()
        .filter(|m| !computation.is_root(**m))
        .map(|&m| span.span(m))
        .max();
    computation
        .members
        .iter()
        .copied()
        .filter(|&m| !computation.is_root(m) && Some(span.span(m)) == top)
        .collect()
}

pub fn compile(graph: &TensorGraph, options: &CompileOptions, lib: &PerfLibrary) -> Result<Compiled> {
    options.cost_params.validate().map_err(Error::Invalid)?;
    let span = compute_span(graph);
    let mut fusion = FusionOptions {
        fuse_dot: options.fuse_dot,
        footprint_limit: options.footprint_limit,
        vetoed: BTreeSet::new(),
    };
    let mut failures: BTreeMap<InstrId, usize> = BTreeMap::new();
    let mut rounds = 0;
    'refuse: loop {
        if rounds > graph.len() {
            return Err(Error::Internal("shared-memory feedback did not converge".into()));
        }
        let plan = fuse_module_with_span(graph, &span, &fusion);
        let mut planned = Vec::with_capacity(plan.computations.len());
        for computation in &plan.computations {
            let tuned = tune(computation, graph, lib, &options.cost_params, &options.tune).map_err(|u| {
                Error::Internal(format!(
                    "no satisfiable schedule for computation rooted at `{}`: {u}",
                    graph.name(computation.fusion_root)
                ))
            })?;
            match plan_shared_memory(computation, graph, &span, &tuned.plan, options.smem_limit) {
                SmemOutcome::Fits(smem) => planned.push((computation.clone(), tuned, smem)),
                SmemOutcome::Infeasible { recommend, .. } => {
                    rounds += 1;
                    let n = failures.entry(computation.fusion_root).or_default();
                    *n += 1;
                    fusion.vetoed.insert(recommend);
                    if *n >= 2 {
                        fusion.vetoed.extend(highest_layer(computation, &span));
                    }
                    continue 'refuse;
                }
            }
        }
        let mut kernels = Vec::with_capacity(planned.len());
        for (computation, tuned, smem) in planned {
            let program = emit(&computation, graph, &tuned.plan, &smem)?;
            kernels.push(CompiledKernel {
                computation,
                tune: tuned,
                smem,
                program,
            });
        }
        return Ok(Compiled {
            span,
            plan,
            kernels,
            vetoed: fusion.vetoed,
            feedback_rounds: rounds,
        });
    }
}

/// One kernel per instruction that is not an input or a library call.
pub fn baseline_kernels(graph: &TensorGraph) -> usize {
    graph
        .instructions()
        .iter()
        .filter(|i| !i.opcode.is_input() && i.opcode != Opcode::LibraryCall)
        .count()
}

/// `1 + r * (1 - 1/s)`: whole-model speedup when a fraction `r` of the
/// time is spent in fusable ops that get `s` times faster.
pub fn predicted_e2e(fusable_ratio: f64, fusion_speedup: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fusable_ratio) {
        return Err(Error::Invalid(format!("fusable ratio {fusable_ratio} is outside [0, 1]")));
    }
    if fusion_speedup.is_nan() || fusion_speedup < 1.0 {
        return Err(Error::Invalid(format!("fusion speedup {fusion_speedup} is below 1")));
    }
    Ok(1.0 + fusable_ratio * (1.0 - 1.0 / fusion_speedup))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComputationSummary {
    pub fusion_root: String,
    pub members: Vec<String>,
    pub roots: Vec<String>,
    pub root_schedules: Vec<String>,
    pub blocks: usize,
    pub block_threads: usize,
    pub smem_total_bytes: usize,
    pub shrunk: Vec<String>,
    pub shared: Vec<(String, String)>,
    pub estimated_cost_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptionsEcho {
    pub fuse_dot: bool,
    pub footprint_limit: usize,
    pub smem_limit: usize,
    pub block_threads: Vec<usize>,
    pub transpose_threshold: usize,
    pub cost_params: CostModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompileReport {
    pub baseline_kernels: usize,
    pub fused_kernels: usize,
    pub fusion_ratio: f64,
    pub computations: Vec<ComputationSummary>,
    pub unfused: Vec<String>,
    pub vetoed: Vec<String>,
    pub feedback_rounds: usize,
    pub options: OptionsEcho,
}

impl CompileReport {
    pub fn new(graph: &TensorGraph, compiled: &Compiled, options: &CompileOptions, baseline: Option<usize>) -> Self {
        let names = |ids: &mut dyn Iterator<Item = InstrId>| ids.map(|i| graph.name(i).to_string()).collect();
        let baseline_kernels = baseline.unwrap_or_else(|| baseline_kernels(graph));
        let fused_kernels = compiled.plan.kernel_count(graph);
        let computations = compiled
            .kernels
            .iter()
            .map(|k| {
                let c = &k.computation;
                ComputationSummary {
                    fusion_root: graph.name(c.fusion_root).to_string(),
                    members: names(&mut c.order.iter().copied()),
                    roots: names(&mut c.roots.iter().copied()),
                    root_schedules: k.tune.root_schedules(c).iter().map(|s| s.to_string()).collect(),
                    blocks: k.tune.plan.blocks,
                    block_threads: k.tune.plan.block_threads,
                    smem_total_bytes: k.smem.total_bytes,
                    shrunk: names(&mut k.smem.shrunk.iter().copied()),
                    shared: k
                        .smem
                        .decisions
                        .iter()
                        .filter_map(|(&id, d)| match d {
                            crate::smem::SmemDecision::Share(t) => {
                                Some((graph.name(id).to_string(), graph.name(*t).to_string()))
                            }
                            _ => None,
                        })
                        .collect(),
                    estimated_cost_us: k.tune.cost_us,
                }
            })
            .collect();
        CompileReport {
            baseline_kernels,
            fused_kernels,
            fusion_ratio: if baseline_kernels == 0 {
                1.0
            } else {
                fused_kernels as f64 / baseline_kernels as f64
            },
            computations,
            unfused: names(&mut compiled.plan.unfused.iter().copied()),
            vetoed: names(&mut compiled.vetoed.iter().copied()),
            feedback_rounds: compiled.feedback_rounds,
            options: OptionsEcho {
                fuse_dot: options.fuse_dot,
                footprint_limit: options.footprint_limit,
                smem_limit: options.smem_limit,
                block_threads: options.tune.block_threads.clone(),
                transpose_threshold: options.tune.transpose_threshold,
                cost_params: options.cost_params.clone(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "baseline_kernels: {}", self.baseline_kernels);
        let _ = writeln!(out, "fused_kernels: {}", self.fused_kernels);
        let _ = writeln!(out, "fusion_ratio: {:.4}", self.fusion_ratio);
        for (i, c) in self.computations.iter().enumerate() {
            let _ = writeln!(out, "computation {i} (fusion_root {}):", c.fusion_root);
            let _ = writeln!(out, "  members: {}", c.members.join(", "));
            let _ = writeln!(out, "  roots: {}", c.roots.join(", "));
            let _ = writeln!(out, "  root_schedules: {}", c.root_schedules.join(" | "));
            let _ = writeln!(out, "  blocks: {} block_threads: {}", c.blocks, c.block_threads);
            let _ = writeln!(out, "  smem_total_bytes: {}", c.smem_total_bytes);
            for (a, b) in &c.shared {
                let _ = writeln!(out, "  {a} SHARE {b}");
            }
            let _ = writeln!(out, "  shrunk: [{}]", c.shrunk.join(", "));
            let _ = writeln!(out, "  estimated_cost_us: {:.3}", c.estimated_cost_us);
        }
        let _ = writeln!(out, "unfused: [{}]", self.unfused.join(", "));
        if !self.vetoed.is_empty() {
            let _ = writeln!(out, "vetoed: [{}] after {} feedback rounds", self.vetoed.join(", "), self.feedback_rounds);
        }
        out
    }
}

/// Runs the compiled graph: kernels through the block simulator, unfused
/// instructions densely, in dependency order.
pub fn execute_compiled(
    graph: &TensorGraph,
    compiled: &Compiled,
    inputs: &BTreeMap<String, TensorValue>,
) -> Result<(BTreeMap<String, TensorValue>, Vec<ExecutionTrace>)> {
    let mut values: BTreeMap<InstrId, TensorValue> = BTreeMap::new();
    let mut traces = vec![ExecutionTrace::default(); compiled.kernels.len()];
    for instr in graph.parameters() {
        let v = inputs
            .get(&instr.name)
            .ok_or_else(|| crate::error::ExecError::MissingInput(instr.name.clone()))?;
        check_input(instr, v)?;
        values.insert(instr.id, v.canonicalized(instr.shape.dtype));
    }
    // Condensed units: kernels by index, everything else alone.
    let kernel_of: BTreeMap<InstrId, usize> = compiled
        .kernels
        .iter()
        .enumerate()
        .flat_map(|(k, c)| c.computation.members.iter().map(move |&m| (m, k)))
        .collect();
    let mut done = vec![false; compiled.kernels.len()];
    let mut pending: Vec<InstrId> = graph.ids().filter(|i| !values.contains_key(i)).collect();
    while !pending.is_empty() {
        let mut progress = false;
        let mut i = 0;
        while i < pending.len() {
            let id = pending[i];
            if values.contains_key(&id) {
                pending.swap_remove(i);
                continue;
            }
            match kernel_of.get(&id) {
                Some(&k) if !done[k] => {
                    let kernel = &compiled.kernels[k];
                    let external = kernel.computation.external_inputs(graph);
                    if external.iter().all(|e| values.contains_key(e)) {
                        let operands: BTreeMap<InstrId, TensorValue> =
                            external.iter().map(|e| (*e, values[e].clone())).collect();
                        let (outs, trace) = run_program(&kernel.program, graph, &operands).map_err(|source| {
                            Error::Kernel {
                                computation: graph.name(kernel.computation.fusion_root).to_string(),
                                schedules: kernel
                                    .tune
                                    .root_schedules(&kernel.computation)
                                    .iter()
                                    .map(|s| s.to_string())
                                    .collect::<Vec<_>>()
                                    .join(" | "),
                                source,
                            }
                        })?;
                        for (root, v) in kernel.computation.roots.iter().zip(outs) {
                            values.insert(*root, v);
                        }
                        traces[k] = trace;
                        done[k] = true;
                        progress = true;
                    }
                    i += 1;
                }
                Some(_) => {
                    // Kernel ran; non-root members have no external value.
                    pending.swap_remove(i);
                    progress = true;
                }
                None => {
                    let instr = graph.instr(id);
                    if instr.operands.iter().all(|o| values.contains_key(o)) {
                        let ops: Vec<&TensorValue> = instr.operands.iter().map(|o| &values[o]).collect();
                        let v = evaluate_dense(graph, instr, &ops)?;
                        values.insert(id, v);
                        pending.swap_remove(i);
                        progress = true;
                    } else {
                        i += 1;
                    }
                }
            }
        }
        if !progress && !pending.is_empty() {
            return Err(Error::Internal("fused plan has a cyclic dependence".into()));
        }
    }
    let outputs = graph
        .outputs()
        .iter()
        .map(|&o| {
            values
                .get(&o)
                .cloned()
                .map(|v| (graph.name(o).to_string(), v))
                .ok_or_else(|| Error::Internal(format!("output `{}` was never produced", graph.name(o))))
        })
        .collect::<Result<_>>()?;
    Ok((outputs, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub kernels: usize,
    pub max_relative_error: f64,
    pub coverage_full: bool,
    pub canary_fills: usize,
    /// Failed runs, with the offending computation and schedules.
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures.is_empty() && self.coverage_full && self.max_relative_error <= tolerance
    }

    pub fn render(&self, tolerance: f64) -> String {
        let mut out = format!(
            "{}: {} trials, {} kernels, max relative error {:e}, coverage {}, canary fills {}\n",
            if self.passed(tolerance) { "PASS" } else { "FAIL" },
            self.trials,
            self.kernels,
            self.max_relative_error,
            if self.coverage_full { "full" } else { "incomplete" },
            self.canary_fills
        );
        for f in &self.failures {
            let _ = writeln!(out, "  {f}");
        }
        out
    }
}

/// Compiles once, then compares simulated execution with the interpreter
/// on `trials` input sets drawn from `seed`, `seed + 1`, ...
pub fn verify_pipeline(
    graph: &TensorGraph,
    options: &CompileOptions,
    trials: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let lib = PerfLibrary::new();
    let compiled = compile(graph, options, &lib)?;
    let mut report = VerifyReport {
        trials,
        kernels: compiled.kernels.len(),
        max_relative_error: 0.0,
        coverage_full: true,
        canary_fills: 0,
        failures: Vec::new(),
    };
    for t in 0..trials {
        let inputs = random_inputs(graph, seed.wrapping_add(t as u64));
        let reference = interpret(graph, &inputs)?;
        match execute_compiled(graph, &compiled, &inputs) {
            Ok((outputs, traces)) => {
                for trace in &traces {
                    report.coverage_full &= trace.coverage_full();
                    report.canary_fills += trace.canary_fills;
                }
                for (name, want) in &reference {
                    let err = max_relative_error(&outputs[name], want);
                    report.max_relative_error = report.max_relative_error.max(err);
                }
            }
            Err(e) => report.failures.push(format!("trial {t}: {e}")),
        }
    }
    Ok(report)
}
