use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use pimsim_core::mapping::{map_k, map_v, Geometry};
use pimsim_core::report::{
    emit_figure, run, DeviceSpec, ExperimentSpec, Figure, ModelSpec, ResultTable,
};
use pimsim_core::sim::ExecMode;
use pimsim_core::verify::verify;
use pimsim_core::workload::InferenceRequest;

#[derive(Parser)]
#[command(name = "pimsim", version, about = "LPDDR5 processing-in-memory inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep devices, models and workloads; write results.csv and results.json.
    Run(RunArgs),
    /// Run the built-in acceptance checks.
    Verify(VerifyArgs),
    /// Render a figure from a previous run's results.json.
    Emit(EmitArgs),
    /// Write the chunk layout of a cache matrix as CSV.
    DumpLayout(LayoutArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment configuration (JSON). Flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Device presets or aliases, comma separated (jetson-agx-orin, iphone-15-pro).
    #[arg(long, value_delimiter = ',')]
    device: Vec<String>,
    /// Model presets or aliases, comma separated (llama-1b, llama-7b, llama-13b).
    #[arg(long, value_delimiter = ',')]
    model: Vec<String>,
    /// Execution modes; the first is the speedup baseline.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<ExecMode>,
    /// Prompt lengths in tokens, comma separated.
    #[arg(long, value_delimiter = ',')]
    lin: Vec<u64>,
    /// Generated tokens per request, comma separated.
    #[arg(long, value_delimiter = ',')]
    lout: Vec<u64>,
    /// Concurrent requests, comma separated.
    #[arg(long, value_delimiter = ',')]
    batch: Vec<u64>,
    /// Output directory. Takes precedence over PIMSIM_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the randomised checks; recorded in results.json.
    #[arg(long)]
    seed: Option<u64>,
}

impl SweepArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentSpec::default(),
        }
        .with_env_overrides();
        if !self.device.is_empty() {
            spec.devices = self.device.iter().cloned().map(DeviceSpec::Preset).collect();
        }
        if !self.model.is_empty() {
            spec.models = self.model.iter().cloned().map(ModelSpec::Preset).collect();
        }
        if !self.modes.is_empty() {
            spec.modes = self.modes.clone();
        }
        if !self.lin.is_empty() {
            spec.lin = self.lin.clone();
        }
        if !self.lout.is_empty() {
            spec.lout = self.lout.clone();
        }
        if !self.batch.is_empty() {
            spec.batch = self.batch.clone();
        }
        if let Some(out) = &self.out {
            spec.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Also write a per-point timeline CSV under OUT/timelines.
    #[arg(long)]
    timeline: bool,
    /// Also write a per-point PIM instruction trace under OUT/traces.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Print the report as JSON instead of text lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EmitArgs {
    /// fig6, fig7 or fig8.
    #[arg(long)]
    figure: Figure,
    /// Directory holding results.json; figures are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowArg {
    K,
    V,
}

#[derive(Args)]
struct LayoutArgs {
    #[arg(long, value_enum)]
    flow: FlowArg,
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long, default_value_t = 1)]
    dies: u32,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Emit(args) => cmd_emit(args),
        Command::DumpLayout(args) => cmd_dump_layout(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let spec = args.sweep.spec()?;
    let table = run(&spec)?;
    info!("{} rows written to {}", table.rows.len(), spec.out_dir.display());
    if args.timeline || args.trace {
        write_per_point(&spec, args.timeline, args.trace)?;
    }
    println!("{}", spec.out_dir.join("results.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn write_per_point(spec: &ExperimentSpec, timeline: bool, trace: bool) -> Result<()> {
    let systems = spec.systems()?;
    for (kind, enabled) in [("timelines", timeline), ("traces", trace)] {
        if enabled {
            fs::create_dir_all(spec.out_dir.join(kind))?;
        }
    }
    for sys in &systems {
        for &lin in &spec.lin {
            for &lout in &spec.lout {
                for &batch in &spec.batch {
                    let req = InferenceRequest::new(lin, lout, batch)?;
                    for &mode in &spec.modes {
                        let rep = sys.simulate(mode, &req)?;
                        let stem = format!(
                            "{}_{}_{}_{lin}_{lout}_{batch}.csv",
                            sys.device.name, sys.model.name, mode
                        );
                        if timeline {
                            let mut f = create(&spec.out_dir.join("timelines").join(&stem))?;
                            rep.write_timeline_csv(&mut f)?;
                            f.flush()?;
                        }
                        if trace && mode != ExecMode::GpuOnly {
                            let mut f = create(&spec.out_dir.join("traces").join(&stem))?;
                            rep.write_instruction_trace(&sys.org, &mut f)?;
                            f.flush()?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let mut spec = args.sweep.spec()?;
    // The determinism check only needs a small sweep unless one was asked for.
    if args.sweep.config.is_none() && args.sweep.lout.is_empty() {
        spec.lout = vec![16, 128];
    }
    let report = verify(&spec);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for c in &report.checks {
            println!("{c}");
        }
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        println!("{} of {} checks passed (seed {})", report.checks.len() - failed, report.checks.len(), report.seed);
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_emit(args: EmitArgs) -> Result<ExitCode> {
    let dir = match args.out {
        Some(d) => d,
        None => ExperimentSpec::default().with_env_overrides().out_dir,
    };
    let path = dir.join("results.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let table: ResultTable = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let written = emit_figure(&table, args.figure, &dir)?;
    if written.is_empty() {
        bail!("no charts produced for {:?}", args.figure);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump_layout(args: LayoutArgs) -> Result<ExitCode> {
    let org = pimsim_core::arch::PimOrg::default();
    let geom = Geometry {
        dies: args.dies,
        ..Geometry::single_die(&org)
    };
    let plan = match args.flow {
        FlowArg::K => map_k(args.rows, args.cols, &geom)?,
        FlowArg::V => map_v(args.rows, args.cols, &geom)?,
    };
    plan.verify_bijection()?;
    match args.out {
        Some(path) => plan.write_layout_csv(create(&path)?)?,
        None => plan.write_layout_csv(io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}
