use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stitchfuse::error::{Error, Result};
use stitchfuse::exec::{interpret, max_relative_error, parse_tensors, random_inputs, tensors_to_json};
use stitchfuse::fixtures;
use stitchfuse::fusion::{fuse_module_with_span, FusionOptions, DEFAULT_FOOTPRINT_LIMIT};
use stitchfuse::ir::{parse_graph, serialize_graph, TensorGraph};
use stitchfuse::pipeline::{compile, execute_compiled, CompileOptions, CompileReport};
use stitchfuse::schedule::{resolve_schedule, Schedule};
use stitchfuse::smem::DEFAULT_SMEM_LIMIT;
use stitchfuse::span::compute_span;
use stitchfuse::tuning::{bypass_set, tune, CostModelParams, PerfLibrary, TuneOptions};

#[derive(Parser, Debug)]
#[command(name = "stitchfuse", version, about = "Deep kernel fusion for tensor graphs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Treat BatchMatMul as fusable instead of a barrier.
    #[arg(long, global = true)]
    fuse_dot: bool,
    #[arg(long, global = true, value_name = "BYTES", default_value_t = DEFAULT_FOOTPRINT_LIMIT)]
    footprint_limit: usize,
    #[arg(long, global = true, value_name = "BYTES", default_value_t = DEFAULT_SMEM_LIMIT)]
    smem_limit: usize,
    /// Performance library file; created if missing, updated after tuning.
    #[arg(long, global = true, value_name = "PATH")]
    perf_lib: Option<PathBuf>,
    /// JSON file overriding cost-model parameters.
    #[arg(long, global = true, value_name = "PATH")]
    cost_params: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the span layer table.
    Span { graph: PathBuf },
    /// Print the fusion plan.
    Fuse { graph: PathBuf },
    /// Resolve one computation under given root schedules.
    Schedule {
        graph: PathBuf,
        /// Fusion root or any root of the computation.
        #[arg(long)]
        computation: String,
        /// `split_dim,sword,row|col`, applied to every root.
        #[arg(long)]
        schedule: Schedule,
    },
    /// Tune every computation and print the chosen plans.
    Tune { graph: PathBuf },
    /// Run the whole pipeline and print the report.
    Compile {
        graph: PathBuf,
        /// Write every kernel's statement listing here.
        #[arg(long, value_name = "PATH")]
        emit_program: Option<PathBuf>,
        /// Compare against an externally computed baseline kernel count.
        #[arg(long, value_name = "N")]
        baseline_count: Option<usize>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Execute the compiled graph on the block simulator.
    Run {
        graph: PathBuf,
        /// Tensor file; random inputs from --seed when absent.
        #[arg(long, value_name = "PATH")]
        inputs: Option<PathBuf>,
        /// Also run the reference interpreter and report the difference.
        #[arg(long)]
        compare_reference: bool,
        /// Write outputs here instead of stdout.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Inspect and combine performance libraries.
    Perflib {
        #[command(subcommand)]
        action: PerflibAction,
    },
    /// Write the bundled graphs as JSON files.
    Fixtures {
        #[arg(default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum PerflibAction {
    Dump { path: PathBuf },
    /// Union `inputs` into `output`.
    Merge {
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    Stats { path: PathBuf },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<TensorGraph> {
    Ok(parse_graph(&read(path)?)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

impl Global {
    fn compile_options(&self) -> Result<CompileOptions> {
        let cost_params = match &self.cost_params {
            Some(p) => CostModelParams::from_json(&read(p)?).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?,
            None => CostModelParams::default(),
        };
        Ok(CompileOptions {
            fuse_dot: self.fuse_dot,
            footprint_limit: self.footprint_limit,
            smem_limit: self.smem_limit,
            cost_params,
            tune: TuneOptions::default(),
        })
    }

    fn fusion_options(&self) -> FusionOptions {
        FusionOptions {
            fuse_dot: self.fuse_dot,
            footprint_limit: self.footprint_limit,
            ..FusionOptions::default()
        }
    }

    fn library(&self) -> Result<PerfLibrary> {
        match &self.perf_lib {
            Some(p) => Ok(PerfLibrary::open(p)?),
            None => Ok(PerfLibrary::new()),
        }
    }
}

fn save_library(lib: &PerfLibrary) -> Result<()> {
    if lib.storage_path().is_some() {
        lib.save()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<String> {
    let g = &cli.global;
    let mut out = String::new();
    match cli.command {
        Command::Span { graph } => {
            let graph = load_graph(&graph)?;
            out = compute_span(&graph).render(&graph);
        }
        Command::Fuse { graph } => {
            let graph = load_graph(&graph)?;
            let span = compute_span(&graph);
            out = fuse_module_with_span(&graph, &span, &g.fusion_options()).render(&graph);
        }
        Command::Schedule {
            graph,
            computation,
            schedule,
        } => {
            let graph = load_graph(&graph)?;
            let id = graph
                .id_of(&computation)
                .ok_or_else(|| Error::Invalid(format!("unknown instruction `{computation}`")))?;
            let span = compute_span(&graph);
            let plan = fuse_module_with_span(&graph, &span, &g.fusion_options());
            let c = plan
                .computations
                .iter()
                .find(|c| c.fusion_root == id || c.is_root(id))
                .ok_or_else(|| Error::Invalid(format!("`{computation}` does not root a fused computation")))?;
            let roots: BTreeMap<_, _> = c.roots.iter().map(|&r| (r, schedule)).collect();
            let bypass = bypass_set(c, &graph, TuneOptions::default().transpose_threshold);
            match resolve_schedule(c, &graph, &roots, &bypass) {
                Ok(p) => {
                    let _ = writeln!(out, "blocks: {}", p.blocks);
                    for &m in &c.order {
                        let s = p.schedule(m).map_or_else(|| "bypassed".to_string(), |s| s.to_string());
                        let _ = writeln!(out, "{}: {s}", graph.name(m));
                    }
                }
                Err(u) => {
                    let _ = writeln!(out, "UNSATISFIABLE: {u}");
                }
            }
        }
        Command::Tune { graph } => {
            let graph = load_graph(&graph)?;
            let options = g.compile_options()?;
            let lib = g.library()?;
            let span = compute_span(&graph);
            let plan = fuse_module_with_span(&graph, &span, &g.fusion_options());
            for (i, c) in plan.computations.iter().enumerate() {
                let r = tune(c, &graph, &lib, &options.cost_params, &options.tune).map_err(|u| {
                    Error::Internal(format!("computation `{}`: {u}", graph.name(c.fusion_root)))
                })?;
                let scheds: Vec<String> = r.root_schedules(c).iter().map(|s| s.to_string()).collect();
                let _ = writeln!(
                    out,
                    "computation {i} ({}): schedules {} blocks {} block_threads {} cost_us {:.3}",
                    graph.name(c.fusion_root),
                    scheds.join(" | "),
                    r.plan.blocks,
                    r.plan.block_threads,
                    r.cost_us
                );
            }
            save_library(&lib)?;
        }
        Command::Compile {
            graph,
            emit_program,
            baseline_count,
            json,
        } => {
            let graph = load_graph(&graph)?;
            let options = g.compile_options()?;
            let lib = g.library()?;
            let compiled = compile(&graph, &options, &lib)?;
            let report = CompileReport::new(&graph, &compiled, &options, baseline_count);
            out = if json { report.to_json() + "\n" } else { report.render() };
            if let Some(path) = emit_program {
                let mut text = String::new();
                for (i, k) in compiled.kernels.iter().enumerate() {
                    let _ = writeln!(text, "# computation {i} ({})", graph.name(k.computation.fusion_root));
                    text.push_str(&k.program.listing(&graph));
                }
                write(&path, &text)?;
            }
            save_library(&lib)?;
        }
        Command::Run {
            graph,
            inputs,
            compare_reference,
            output,
        } => {
            let graph = load_graph(&graph)?;
            let inputs = match inputs {
                Some(p) => parse_tensors(&read(&p)?)?,
                None => random_inputs(&graph, g.seed),
            };
            let lib = g.library()?;
            let compiled = compile(&graph, &g.compile_options()?, &lib)?;
            let (outputs, traces) = execute_compiled(&graph, &compiled, &inputs)?;
            let text = tensors_to_json(&outputs) + "\n";
            match output {
                Some(p) => write(&p, &text)?,
                None => out.push_str(&text),
            }
            if compare_reference {
                let reference = interpret(&graph, &inputs)?;
                let err = reference
                    .iter()
                    .map(|(n, v)| max_relative_error(&outputs[n], v))
                    .fold(0.0, f64::max);
                let coverage = traces.iter().all(|t| t.coverage_full());
                eprintln!("max_relative_error: {err:e}");
                eprintln!("coverage: {}", if coverage { "full" } else { "incomplete" });
                if err > 1e-5 || !coverage {
                    return Err(Error::Internal(format!("simulated outputs differ from the reference by {err:e}")));
                }
            }
            save_library(&lib)?;
        }
        Command::Perflib { action } => match action {
            PerflibAction::Dump { path } => out = PerfLibrary::load(&path)?.to_text(),
            PerflibAction::Merge { output, inputs } => {
                let lib = PerfLibrary::open(&output)?;
                for p in &inputs {
                    lib.merge(&PerfLibrary::load(p)?);
                }
                lib.save()?;
                let _ = writeln!(out, "{} entries", lib.len());
            }
            PerflibAction::Stats { path } => {
                let _ = writeln!(out, "{}", PerfLibrary::load(&path)?.stats());
            }
        },
        Command::Fixtures { out_dir } => {
            fs::create_dir_all(&out_dir).map_err(|e| Error::Invalid(format!("{}: {e}", out_dir.display())))?;
            for name in fixtures::NAMES {
                let graph = fixtures::by_name(name).expect("listed fixture");
                let path = out_dir.join(format!("{name}.json"));
                write(&path, &serialize_graph(&graph))?;
                let _ = writeln!(out, "{}", path.display());
            }
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
