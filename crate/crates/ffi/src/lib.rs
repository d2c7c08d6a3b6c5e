//! C ABI over `pimsim-core`.
//!
//! Every entry point returns a [`PimsimStatus`]. On failure a message is
//! stored per thread and can be read with [`pimsim_last_error`]. Objects are
//! handed out as opaque pointers and must be released with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pimsim_core::arch::{derive_bandwidths, estimate_overhead, PimOrg};
use pimsim_core::isa::{self, ComputeMode, InstructionKind};
use pimsim_core::mapping::{map_k, map_v, Geometry};
use pimsim_core::report::{DeviceSpec, ModelSpec};
use pimsim_core::sim::{ExecMode, LatencyReport, SimParams, System};
use pimsim_core::workload::InferenceRequest;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PimsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownPreset = 3,
    InvalidConfig = 4,
    SimulationFailed = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PimsimMode {
    GpuOnly = 0,
    Hbcem = 1,
    Lbim = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PimsimInstruction {
    PimMacFm = 0,
    MactLdb = 1,
    MacbLdt = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PimsimFlow {
    K = 0,
    V = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PimsimBandwidths {
    pub external_bytes_per_s: u64,
    pub internal_hbcem_bytes_per_s: u64,
    pub internal_lbim_bytes_per_s: u64,
    pub mac_per_s: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PimsimOverhead {
    pub cu_area_um2: f64,
    pub area_fraction: f64,
    pub cu_power_mw: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PimsimSummary {
    pub end_to_end_s: f64,
    pub mean_ttft_s: f64,
    pub mean_decode_s: f64,
    pub internal_bw_used: f64,
    pub pim_utilization: f64,
    pub pim_weight_bytes: u64,
    pub mode_switches: u64,
}

/// A validated device, PIM organisation, model and calibration.
pub struct PimsimSystem(System);

/// The result of one simulation.
pub struct PimsimReport(LatencyReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(PimsimStatus, String);

impl Failure {
    fn new(status: PimsimStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PimsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PimsimStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PimsimStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass pointers obtained from this library or valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(PimsimStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass pointers valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| Failure::new(PimsimStatus::NullPointer, format!("{what} is null")))
}

fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(PimsimStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and documented as NUL-terminated.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::new(PimsimStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn config_err(e: impl ToString) -> Failure {
    Failure::new(PimsimStatus::InvalidConfig, e)
}

impl From<PimsimMode> for ExecMode {
    fn from(m: PimsimMode) -> Self {
        match m {
            PimsimMode::GpuOnly => ExecMode::GpuOnly,
            PimsimMode::Hbcem => ExecMode::Hbcem,
            PimsimMode::Lbim => ExecMode::Lbim,
        }
    }
}

impl From<PimsimInstruction> for InstructionKind {
    fn from(k: PimsimInstruction) -> Self {
        match k {
            PimsimInstruction::PimMacFm => InstructionKind::PimMacFm,
            PimsimInstruction::MactLdb => InstructionKind::MactLdb,
            PimsimInstruction::MacbLdt => InstructionKind::MacbLdt,
        }
    }
}

impl From<InstructionKind> for PimsimInstruction {
    fn from(k: InstructionKind) -> Self {
        match k {
            InstructionKind::PimMacFm => PimsimInstruction::PimMacFm,
            InstructionKind::MactLdb => PimsimInstruction::MactLdb,
            InstructionKind::MacbLdt => PimsimInstruction::MacbLdt,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pimsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn pimsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a system from device and model preset names (aliases such as "jetson" and "7b" work).
///
/// # Safety
/// `device` and `model` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_system_new(
    device: *const c_char,
    model: *const c_char,
    out: *mut *mut PimsimSystem,
) -> PimsimStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (device, model) = (c_str(device, "device")?, c_str(model, "model")?);
        let sys = System::preset(device, model).map_err(|e| Failure::new(PimsimStatus::UnknownPreset, e))?;
        *out = Box::into_raw(Box::new(PimsimSystem(sys)));
        Ok(())
    })
}

/// Builds a system from JSON of the form
/// `{"device": <preset or object>, "model": <preset or object>, "org": {...}, "params": {...}}`.
/// `org` and `params` are optional.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_system_from_json(json: *const c_char, out: *mut *mut PimsimSystem) -> PimsimStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mut v: serde_json::Value = serde_json::from_str(c_str(json, "json")?).map_err(config_err)?;
        let mut take = |key: &str| v.get_mut(key).map(serde_json::Value::take);
        let device: DeviceSpec = serde_json::from_value(take("device").ok_or_else(|| config_err("missing \"device\""))?)
            .map_err(config_err)?;
        let model: ModelSpec = serde_json::from_value(take("model").ok_or_else(|| config_err("missing \"model\""))?)
            .map_err(config_err)?;
        let org: PimOrg = take("org").map(serde_json::from_value).transpose().map_err(config_err)?.unwrap_or_default();
        let params: SimParams = take("params").map(serde_json::from_value).transpose().map_err(config_err)?.unwrap_or_default();
        let sys = System::new(device.resolve().map_err(config_err)?, org, model.resolve().map_err(config_err)?, params)
            .map_err(config_err)?;
        *out = Box::into_raw(Box::new(PimsimSystem(sys)));
        Ok(())
    })
}

/// # Safety
/// `sys` must come from `pimsim_system_new`/`pimsim_system_from_json` and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pimsim_system_free(sys: *mut PimsimSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// # Safety
/// `sys` must be a live system handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_system_bandwidths(sys: *const PimsimSystem, out: *mut PimsimBandwidths) -> PimsimStatus {
    guard(|| {
        let s = &non_null(sys, "sys")?.0;
        let b = derive_bandwidths(&s.device, &s.org);
        *out_ptr(out, "out")? = PimsimBandwidths {
            external_bytes_per_s: b.external,
            internal_hbcem_bytes_per_s: b.internal_hbcem,
            internal_lbim_bytes_per_s: b.internal_lbim,
            mac_per_s: b.mac_throughput,
        };
        Ok(())
    })
}

/// Compute-unit area and power summed over all dies of the system.
///
/// # Safety
/// `sys` must be a live system handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_system_overhead(sys: *const PimsimSystem, out: *mut PimsimOverhead) -> PimsimStatus {
    guard(|| {
        let s = &non_null(sys, "sys")?.0;
        let o = estimate_overhead(&s.org, s.device.die_count);
        *out_ptr(out, "out")? = PimsimOverhead {
            cu_area_um2: o.total_cu_area_um2,
            area_fraction: o.area_fraction,
            cu_power_mw: o.total_cu_power_mw,
        };
        Ok(())
    })
}

/// Simulates `batch` requests of `lin` prompt tokens and `lout` generated tokens.
///
/// # Safety
/// `sys` must be a live system handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_simulate(
    sys: *const PimsimSystem,
    mode: PimsimMode,
    lin: u64,
    lout: u64,
    batch: u64,
    out: *mut *mut PimsimReport,
) -> PimsimStatus {
    guard(|| {
        let s = &non_null(sys, "sys")?.0;
        let out = out_ptr(out, "out")?;
        let req = InferenceRequest::new(lin, lout, batch).map_err(|e| Failure::new(PimsimStatus::InvalidArgument, e))?;
        let rep = s
            .simulate(mode.into(), &req)
            .map_err(|e| Failure::new(PimsimStatus::SimulationFailed, e))?;
        *out = Box::into_raw(Box::new(PimsimReport(rep)));
        Ok(())
    })
}

/// # Safety
/// `rep` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_report_summary(rep: *const PimsimReport, out: *mut PimsimSummary) -> PimsimStatus {
    guard(|| {
        let r = &non_null(rep, "rep")?.0;
        *out_ptr(out, "out")? = PimsimSummary {
            end_to_end_s: r.end_to_end_s,
            mean_ttft_s: r.mean_ttft_s(),
            mean_decode_s: r.mean_decode_s(),
            internal_bw_used: r.internal_bw_used(),
            pim_utilization: r.pim_utilization(),
            pim_weight_bytes: r.pim_weight_bytes,
            mode_switches: r.mode_switch_log.len() as u64,
        };
        Ok(())
    })
}

/// Serialises the full report. Release the string with `pimsim_string_free`.
///
/// # Safety
/// `rep` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_report_json(rep: *const PimsimReport, out: *mut *mut c_char) -> PimsimStatus {
    guard(|| {
        let r = &non_null(rep, "rep")?.0;
        let out = out_ptr(out, "out")?;
        let text = serde_json::to_string(r).map_err(|e| Failure::new(PimsimStatus::SimulationFailed, e))?;
        *out = CString::new(text).map_err(|e| Failure::new(PimsimStatus::SimulationFailed, e))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `rep` must come from `pimsim_simulate` and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pimsim_report_free(rep: *mut PimsimReport) {
    if !rep.is_null() {
        drop(Box::from_raw(rep));
    }
}

/// # Safety
/// `s` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pimsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes the (SEL0, SEL1) control bits of an instruction.
///
/// # Safety
/// `sel0` and `sel1` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_encode(kind: PimsimInstruction, sel0: *mut u8, sel1: *mut u8) -> PimsimStatus {
    guard(|| {
        let (a, b) = isa::encode(kind.into());
        *out_ptr(sel0, "sel0")? = a;
        *out_ptr(sel1, "sel1")? = b;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pimsim_decode(sel0: u8, sel1: u8, out: *mut PimsimInstruction) -> PimsimStatus {
    guard(|| {
        let kind = isa::decode(sel0, sel1).map_err(|e| Failure::new(PimsimStatus::InvalidArgument, e))?;
        *out_ptr(out, "out")? = kind.into();
        Ok(())
    })
}

/// Runs an INT8 GEMV through the PIM layout: `out[c] = sum_r matrix[r * cols + c] * input[r]`.
/// The K flow expects a head_dim x context matrix, the V flow a context x head_dim matrix.
///
/// # Safety
/// `matrix` must hold `rows * cols` values, `input` `rows` values and `out` room for `cols` values.
#[no_mangle]
pub unsafe extern "C" fn pimsim_gemv(
    flow: PimsimFlow,
    matrix: *const i8,
    rows: usize,
    cols: usize,
    input: *const i8,
    dies: u32,
    out: *mut i64,
) -> PimsimStatus {
    guard(|| {
        if matrix.is_null() || input.is_null() || out.is_null() {
            return Err(Failure::new(PimsimStatus::NullPointer, "buffer is null"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure::new(PimsimStatus::InvalidArgument, "rows * cols overflows"))?;
        let m = std::slice::from_raw_parts(matrix, len);
        let x = std::slice::from_raw_parts(input, rows);
        let geom = Geometry {
            dies,
            ..Geometry::single_die(&PimOrg::default())
        };
        let bad = |e: pimsim_core::mapping::MappingError| Failure::new(PimsimStatus::InvalidArgument, e);
        let plan = match flow {
            PimsimFlow::K => map_k(rows, cols, &geom),
            PimsimFlow::V => map_v(rows, cols, &geom),
        }
        .map_err(bad)?;
        let result = plan.execute(m, x, ComputeMode::Full).map_err(bad)?;
        std::slice::from_raw_parts_mut(out, cols).copy_from_slice(&result.values);
        Ok(())
    })
}
