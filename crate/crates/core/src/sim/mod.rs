//! Latency model and two-resource scheduler for GPU-only, HBCEM and LBIM execution.
//!
//! Time inside the scheduler is kept in integer picoseconds so that the
//! half-mode slowdown is exact and report invariants can be compared without
//! tolerances. Public summaries convert to seconds.
//!
//! Three scalars calibrate the analytical model against measured latencies:
//! `host_bw_efficiency` (fraction of peak DRAM bandwidth the processor
//! sustains on decode GEMVs), `pim_bw_efficiency` (fraction of the ideal
//! tile rate the PIM sustains once command issue and refresh are included)
//! and `handoff_latency_s` (fixed cost of each processor/PIM activation
//! handoff). The prefill utilisation of 0.85 is the fourth knob.

mod engine;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{derive_bandwidths, validate, ConfigErrors, DeviceConfig, PimOrg};
use crate::isa::{ComputeMode, InstructionKind, TraceRecord, TILE_ROWS};
use crate::mapping::{pass_count, Geometry};
use crate::workload::{
    decode_step_ops, prefill_ops, InferenceRequest, ModelConfig, OpDescriptor, Placement, WorkloadError,
};

pub use engine::simulate;

pub const PS_PER_S: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invalid simulation parameter {name}: {value}")]
    Param { name: &'static str, value: f64 },
    #[error("reports describe different workloads: {0}")]
    Mismatch(String),
    #[error("schedule invariant violated: {0}")]
    Invariant(String),
    #[error("unknown execution mode {0:?} (expected gpu_only, hbcem or lbim)")]
    UnknownMode(String),
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    GpuOnly,
    Hbcem,
    Lbim,
}

impl ExecMode {
    pub const ALL: [ExecMode; 3] = [ExecMode::GpuOnly, ExecMode::Hbcem, ExecMode::Lbim];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecMode::GpuOnly => "gpu_only",
            ExecMode::Hbcem => "hbcem",
            ExecMode::Lbim => "lbim",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gpu_only" | "gpu" => Ok(ExecMode::GpuOnly),
            "hbcem" => Ok(ExecMode::Hbcem),
            "lbim" => Ok(ExecMode::Lbim),
            _ => Err(SimError::UnknownMode(s.to_string())),
        }
    }
}

/// How a batch of decode tokens shares weight traffic on the PIM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PimBatchMode {
    /// Every request streams every weight for every token.
    Serial,
    /// Shared weights are streamed once per step and amortised over the
    /// batch, but each request still pays the full MAC time.
    WeightShared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Fraction of peak compute the processor reaches on prefill GEMMs.
    pub gemm_utilization: f64,
    pub host_bw_efficiency: f64,
    pub pim_bw_efficiency: f64,
    pub handoff_latency_s: f64,
    /// Share of external bandwidth left to prefills that overlap LBIM decode.
    pub lbim_host_bw_fraction: f64,
    pub pim_batch_mode: PimBatchMode,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            gemm_utilization: 0.85,
            host_bw_efficiency: 0.395,
            pim_bw_efficiency: 0.14,
            handoff_latency_s: 10e-6,
            lbim_host_bw_fraction: 1.0,
            pim_batch_mode: PimBatchMode::Serial,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let unit = |name, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(SimError::Param { name, value: v })
            }
        };
        unit("gemm_utilization", self.gemm_utilization)?;
        unit("host_bw_efficiency", self.host_bw_efficiency)?;
        unit("pim_bw_efficiency", self.pim_bw_efficiency)?;
        unit("lbim_host_bw_fraction", self.lbim_host_bw_fraction)?;
        if !(self.handoff_latency_s >= 0.0 && self.handoff_latency_s.is_finite()) {
            return Err(SimError::Param {
                name: "handoff_latency_s",
                value: self.handoff_latency_s,
            });
        }
        Ok(())
    }
}

pub fn host_gemm_latency(flops: f64, device: &DeviceConfig, utilization: f64) -> f64 {
    flops / (device.compute_throughput * utilization)
}

pub fn host_gemv_latency(weight_bytes: u64, device: &DeviceConfig) -> f64 {
    weight_bytes as f64 / device.external_bandwidth as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PimLatency {
    pub stream_s: f64,
    pub broadcast_s: f64,
}

impl PimLatency {
    pub fn total(&self) -> f64 {
        self.stream_s + self.broadcast_s
    }
}

/// Ideal PIM GEMV time: weights at the mode's internal bandwidth plus the
/// input vector sent over the external interface.
pub fn pim_gemv_latency(
    weight_bytes: u64,
    input_bytes: u64,
    mode: ComputeMode,
    device: &DeviceConfig,
    org: &PimOrg,
) -> PimLatency {
    let bw = derive_bandwidths(device, org);
    let internal = match mode {
        ComputeMode::Full => bw.internal_hbcem,
        ComputeMode::Half => bw.internal_lbim,
    };
    PimLatency {
        stream_s: weight_bytes as f64 / internal as f64,
        broadcast_s: input_bytes as f64 / device.external_bandwidth as f64,
    }
}

/// Full-mode internal cycles one PIM GEMV occupies on the busiest die.
pub fn pim_op_cycles(op: &OpDescriptor, geom: &Geometry) -> u64 {
    let Some(flow) = op.role.flow() else { return 0 };
    let (_, k, n) = op.shape;
    let passes = pass_count(flow, k as usize, n as usize, geom) as u64;
    passes.div_ceil(u64::from(geom.dies)) * TILE_ROWS as u64
}

pub(crate) fn to_ps(seconds: f64) -> u64 {
    (seconds * PS_PER_S).round() as u64
}

/// Cost of one decode token executed through the PIM path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCost {
    /// Host-side work that does not depend on the compute mode: input
    /// broadcasts, softmax and norms, and activation handoffs.
    pub fixed_ps: u64,
    /// PIM compute time in full mode; half mode takes exactly twice this.
    pub pim_full_ps: u64,
    pub pim_weight_bytes: u64,
}

/// Everything the scheduler needs to know about one workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub prefill_ps: u64,
    /// Prefill time while LBIM decode holds part of the memory bandwidth.
    pub prefill_shared_ps: u64,
    /// Processor decode time per request, indexed by step − 1.
    pub gpu_decode_ps: Vec<u64>,
    pub tokens: Vec<TokenCost>,
}

/// Device, PIM organisation, model and calibration bundled for repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub device: DeviceConfig,
    pub org: PimOrg,
    pub model: ModelConfig,
    pub params: SimParams,
}

impl System {
    pub fn new(device: DeviceConfig, org: PimOrg, model: ModelConfig, params: SimParams) -> Result<Self, SimError> {
        validate(device.clone(), org.clone())?;
        model.validate()?;
        params.validate()?;
        Ok(System {
            device,
            org,
            model,
            params,
        })
    }

    pub fn preset(device: &str, model: &str) -> Result<Self, SimError> {
        let dev = DeviceConfig::preset(device).ok_or_else(|| {
            SimError::Workload(WorkloadError::UnknownPreset(device.to_string()))
        })?;
        Self::new(dev, PimOrg::default(), ModelConfig::preset(model)?, SimParams::default())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(&self.device, &self.org)
    }

    fn bw_seconds(&self, bytes: u64) -> f64 {
        host_gemv_latency(bytes, &self.device)
    }

    fn prefill_seconds(&self, lin: u64, bw_fraction: f64) -> Result<f64, SimError> {
        let ops = prefill_ops(&self.model, lin)?;
        let bw = self.device.external_bandwidth as f64 * bw_fraction;
        Ok(ops
            .iter()
            .map(|op| {
                let compute = host_gemm_latency(op.flops as f64, &self.device, self.params.gemm_utilization);
                let memory = (op.weight_bytes + op.activation_bytes) as f64 / bw;
                compute.max(memory)
            })
            .sum())
    }

    /// Per-request processor time of one batched decode step over `l` tokens.
    fn gpu_decode_seconds(&self, ops: &[OpDescriptor], batch: u64) -> f64 {
        ops.iter()
            .map(|op| match op.placement {
                Placement::HostOnly => self.bw_seconds(op.activation_bytes),
                Placement::PimEligible => {
                    let bytes = if op.role.shares_weights() {
                        op.weight_bytes as f64 / batch as f64
                    } else {
                        op.weight_bytes as f64
                    };
                    bytes / (self.device.external_bandwidth as f64 * self.params.host_bw_efficiency)
                }
            })
            .sum()
    }

    fn token_cost(&self, ops: &[OpDescriptor], batch: u64) -> TokenCost {
        let geom = self.geometry();
        let clock = self.org.internal_clock as f64;
        let eff = self.params.pim_bw_efficiency;
        let p = self.model.weight_precision;
        let mut fixed = 0.0;
        let mut pim = 0.0;
        let mut bytes = 0;
        for op in ops {
            match op.placement {
                Placement::HostOnly => fixed += self.bw_seconds(op.activation_bytes),
                Placement::PimEligible => {
                    let ideal = pim_op_cycles(op, &geom) as f64 / clock;
                    pim += match self.params.pim_batch_mode {
                        PimBatchMode::WeightShared if op.role.shares_weights() => {
                            (ideal / eff / batch as f64).max(ideal)
                        }
                        _ => ideal / eff,
                    };
                    fixed += self.bw_seconds(op.input_bytes(p));
                    bytes += op.weight_bytes;
                }
            }
        }
        // embeddings in and logits out, plus two crossings per layer around softmax
        let handoffs = 2 * self.model.layers + 2;
        fixed += handoffs as f64
            * (self.params.handoff_latency_s + self.bw_seconds(self.model.hidden_dim * p));
        TokenCost {
            fixed_ps: to_ps(fixed),
            pim_full_ps: to_ps(pim),
            pim_weight_bytes: bytes,
        }
    }

    pub fn cost_table(&self, req: &InferenceRequest) -> Result<CostTable, SimError> {
        req.validate()?;
        let mut gpu_decode_ps = Vec::with_capacity(req.lout as usize);
        let mut tokens = Vec::with_capacity(req.lout as usize);
        for step in 1..=req.lout {
            let ops = decode_step_ops(&self.model, req.lin + step)?;
            gpu_decode_ps.push(to_ps(self.gpu_decode_seconds(&ops, req.batch)));
            tokens.push(self.token_cost(&ops, req.batch));
        }
        Ok(CostTable {
            prefill_ps: to_ps(self.prefill_seconds(req.lin, 1.0)?),
            prefill_shared_ps: to_ps(self.prefill_seconds(req.lin, self.params.lbim_host_bw_fraction)?),
            gpu_decode_ps,
            tokens,
        })
    }

    pub fn simulate(&self, mode: ExecMode, req: &InferenceRequest) -> Result<LatencyReport, SimError> {
        let costs = self.cost_table(req)?;
        let mut report = simulate(mode, req, &costs);
        report.device = self.device.name.clone();
        report.model = self.model.name.clone();
        Ok(report)
    }
}

pub fn simulate_gpu_only(req: &InferenceRequest, device: &DeviceConfig, model: &ModelConfig) -> Result<LatencyReport, SimError> {
    System::new(device.clone(), PimOrg::default(), model.clone(), SimParams::default())?.simulate(ExecMode::GpuOnly, req)
}

pub fn simulate_hbcem(
    req: &InferenceRequest,
    device: &DeviceConfig,
    model: &ModelConfig,
    org: &PimOrg,
) -> Result<LatencyReport, SimError> {
    System::new(device.clone(), org.clone(), model.clone(), SimParams::default())?.simulate(ExecMode::Hbcem, req)
}

pub fn simulate_lbim(
    req: &InferenceRequest,
    device: &DeviceConfig,
    model: &ModelConfig,
    org: &PimOrg,
) -> Result<LatencyReport, SimError> {
    System::new(device.clone(), org.clone(), model.clone(), SimParams::default())?.simulate(ExecMode::Lbim, req)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Processor,
    Pim,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resource::Processor => "processor",
            Resource::Pim => "pim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Prefill,
    DecodeToken { step: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub request: usize,
    pub kind: TaskKind,
    pub resource: Resource,
    pub depends_on: Vec<usize>,
    pub start_ps: u64,
    pub end_ps: u64,
}

impl Task {
    pub fn duration_ps(&self) -> u64 {
        self.end_ps - self.start_ps
    }
}

/// One busy interval of a resource. A task interrupted by a mode switch
/// spans several consecutive intervals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub resource: Resource,
    pub start_ps: u64,
    pub end_ps: u64,
    pub task: usize,
    pub instruction: Option<InstructionKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSwitch {
    pub time_ps: u64,
    pub from: Option<InstructionKind>,
    pub to: InstructionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLatency {
    pub request: usize,
    pub ttft_s: f64,
    pub decode_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: ExecMode,
    pub device: String,
    pub model: String,
    pub workload: InferenceRequest,
    pub requests: Vec<RequestLatency>,
    pub end_to_end_s: f64,
    pub end_to_end_ps: u64,
    pub tasks: Vec<Task>,
    pub timeline: Vec<TimelineEntry>,
    pub mode_switch_log: Vec<ModeSwitch>,
    pub pim_weight_bytes: u64,
    pub pim_busy_ps: u64,
    pub processor_busy_ps: u64,
}

/// `b.end_to_end / a.end_to_end`: how many times faster `a` finishes than `b`.
pub fn speedup(a: &LatencyReport, b: &LatencyReport) -> Result<f64, SimError> {
    if a.workload != b.workload || a.device != b.device || a.model != b.model {
        return Err(SimError::Mismatch(format!(
            "{}/{}/{:?} vs {}/{}/{:?}",
            a.device, a.model, a.workload, b.device, b.model, b.workload
        )));
    }
    Ok(b.end_to_end_ps as f64 / a.end_to_end_ps as f64)
}

impl LatencyReport {
    pub fn mean_ttft_s(&self) -> f64 {
        mean(self.requests.iter().map(|r| r.ttft_s))
    }

    pub fn mean_decode_s(&self) -> f64 {
        mean(self.requests.iter().map(|r| r.decode_s))
    }

    /// Bytes the PIM streamed per second of PIM busy time.
    pub fn internal_bw_used(&self) -> f64 {
        if self.pim_busy_ps == 0 {
            0.0
        } else {
            self.pim_weight_bytes as f64 / (self.pim_busy_ps as f64 / PS_PER_S)
        }
    }

    pub fn pim_utilization(&self) -> f64 {
        if self.end_to_end_ps == 0 {
            0.0
        } else {
            self.pim_busy_ps as f64 / self.end_to_end_ps as f64
        }
    }

    /// Non-overlap and ordering per resource, dependency safety, work
    /// conservation and `end_to_end == max task end`.
    pub fn check_invariants(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Invariant(msg));
        for res in [Resource::Processor, Resource::Pim] {
            let mut last_end = 0;
            let mut busy = 0;
            for e in self.timeline.iter().filter(|e| e.resource == res) {
                if e.start_ps < last_end || e.end_ps < e.start_ps {
                    return bad(format!("{res} interval {}..{} overlaps or is unsorted", e.start_ps, e.end_ps));
                }
                last_end = e.end_ps;
                busy += e.end_ps - e.start_ps;
            }
            let task_sum: u64 = self.tasks.iter().filter(|t| t.resource == res).map(Task::duration_ps).sum();
            if task_sum != busy {
                return bad(format!("{res}: task durations {task_sum} ps != busy time {busy} ps"));
            }
            let recorded = match res {
                Resource::Processor => self.processor_busy_ps,
                Resource::Pim => self.pim_busy_ps,
            };
            if recorded != busy {
                return bad(format!("{res}: recorded busy {recorded} ps != timeline {busy} ps"));
            }
        }
        for t in &self.tasks {
            for &d in &t.depends_on {
                let dep = &self.tasks[d];
                if t.start_ps < dep.end_ps {
                    return bad(format!("task {} starts at {} before dependency {} ends at {}", t.id, t.start_ps, d, dep.end_ps));
                }
            }
        }
        let max_end = self.tasks.iter().map(|t| t.end_ps).max().unwrap_or(0);
        if max_end != self.end_to_end_ps {
            return bad(format!("end_to_end {} ps != last task end {max_end} ps", self.end_to_end_ps));
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(out, self).map_err(|e| SimError::Io(e.into()))
    }

    /// `resource,start_s,end_s,request,task,instruction`, one line per interval.
    pub fn write_timeline_csv<W: Write>(&self, mut out: W) -> Result<(), SimError> {
        writeln!(out, "resource,start_s,end_s,request,task,instruction")?;
        for e in &self.timeline {
            let t = &self.tasks[e.task];
            let task = match t.kind {
                TaskKind::Prefill => "prefill".to_string(),
                TaskKind::DecodeToken { step } => format!("decode_{step}"),
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.resource,
                e.start_ps as f64 / PS_PER_S,
                e.end_ps as f64 / PS_PER_S,
                t.request,
                task,
                e.instruction.map(|i| i.mnemonic()).unwrap_or("")
            )?;
        }
        Ok(())
    }

    /// One instruction-trace line per bank for each PIM interval, in internal-clock cycles.
    pub fn write_instruction_trace<W: Write>(&self, org: &PimOrg, mut out: W) -> Result<(), SimError> {
        writeln!(out, "{}", TraceRecord::HEADER)?;
        let per_ps = org.internal_clock as f64 / PS_PER_S;
        for e in self.timeline.iter().filter(|e| e.resource == Resource::Pim) {
            let Some(kind) = e.instruction else { continue };
            let cycle = (e.start_ps as f64 * per_ps).floor() as u64;
            for bank in 0..org.banks_per_die {
                writeln!(out, "{}", TraceRecord { cycle, kind, bank })?;
            }
        }
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests;
