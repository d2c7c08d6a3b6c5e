//! Self-check suite behind `pimsim verify`.
//!
//! Each check is independent and reports a single pass/fail line. Randomised
//! checks draw from a generator seeded by the experiment spec.

use std::fmt;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::arch::{derive_bandwidths, estimate_overhead, DeviceConfig, PimOrg};
use crate::datapath::{run_k_flow, run_v_flow, Tile};
use crate::isa::{active_roles, decode, encode, ComputeMode, InstructionKind, PbankRole};
use crate::mapping::{map_k, map_v, reference_gemv, Geometry};
use crate::report::{run_in_memory, table_csv, ExperimentSpec};
use crate::sim::{speedup, ExecMode, System};
use crate::workload::{InferenceRequest, ModelConfig};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub id: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>3} {:<28} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Outcome = Result<String, String>;

fn check(id: &'static str, name: &'static str, f: impl FnOnce() -> Outcome) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        id,
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_i8(rng: &mut StdRng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.gen::<i8>()).collect()
}

fn log_uniform(rng: &mut StdRng, max: usize) -> usize {
    let x: f64 = rng.gen_range(0.0..(max as f64).ln());
    (x.exp() as usize).clamp(1, max)
}

fn gemv_oracle(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed);
    let org = PimOrg::default();
    for i in 0..200 {
        for v_flow in [false, true] {
            let h = rng.gen_range(1..=256);
            let l = rng.gen_range(1..=512);
            let geom = Geometry {
                dies: rng.gen_range(1..=4),
                ..Geometry::single_die(&org)
            };
            let (rows, cols) = if v_flow { (l, h) } else { (h, l) };
            let m = random_i8(&mut rng, rows * cols);
            let x = random_i8(&mut rng, rows);
            let plan = if v_flow { map_v(rows, cols, &geom) } else { map_k(rows, cols, &geom) }
                .map_err(|e| e.to_string())?;
            let got = plan.execute(&m, &x, ComputeMode::Full).map_err(|e| e.to_string())?;
            ensure(got.values == reference_gemv(&m, rows, cols, &x), || {
                format!("instance {i} ({rows}x{cols}, v_flow={v_flow}) differs from reference")
            })?;
        }
    }
    Ok("200 K-flow + 200 V-flow instances match".into())
}

fn bijection(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x9e37);
    let org = PimOrg::default();
    let geom = Geometry::single_die(&org);
    for i in 0..100 {
        let rows = log_uniform(&mut rng, 4096);
        let cols = log_uniform(&mut rng, 4096);
        let plan = if i % 2 == 0 { map_k(rows, cols, &geom) } else { map_v(rows, cols, &geom) }
            .map_err(|e| e.to_string())?;
        plan.verify_bijection().map_err(|e| format!("{rows}x{cols}: {e}"))?;
        if plan.chunks().len() > 1 {
            ensure(plan.perturbed().verify_bijection().is_err(), || {
                format!("{rows}x{cols}: off-by-one chunk not detected")
            })?;
        }
    }
    Ok("100 shapes round-trip; corrupted layouts rejected".into())
}

fn bandwidths() -> Outcome {
    let org = PimOrg::default();
    let j = derive_bandwidths(&DeviceConfig::jetson_agx_orin(), &org);
    let i = derive_bandwidths(&DeviceConfig::iphone_15_pro(), &org);
    ensure(j.external == 204_800_000_000, || format!("jetson external {}", j.external))?;
    ensure(i.external == 51_200_000_000, || format!("iphone external {}", i.external))?;
    ensure(j.internal_hbcem == 6_553_600_000_000, || format!("jetson internal {}", j.internal_hbcem))?;
    for b in [j, i] {
        ensure(b.internal_hbcem == 2 * b.internal_lbim, || "hbcem != 2 x lbim".into())?;
    }
    ensure(org.bank_bytes_per_cycle() == 128, || "bank bytes per cycle".into())?;
    Ok(format!("external 204.8/51.2 GB/s, internal {} B/s", j.internal_hbcem))
}

fn instructions() -> Outcome {
    let table = [
        (InstructionKind::PimMacFm, (1, 1)),
        (InstructionKind::MactLdb, (0, 1)),
        (InstructionKind::MacbLdt, (1, 0)),
    ];
    for (k, bits) in table {
        ensure(encode(k) == bits && decode(bits.0, bits.1) == Ok(k), || format!("{k} encoding"))?;
        let roles = active_roles(k);
        let compute = roles.with_role(PbankRole::PimCompute).count();
        let host = roles.with_role(PbankRole::HostAccess).count();
        ensure(compute + host == 4 && compute == if k == InstructionKind::PimMacFm { 4 } else { 2 }, || {
            format!("{k} role partition {roles}")
        })?;
    }
    ensure(decode(0, 0).is_err(), || "(0,0) accepted".into())?;
    Ok("three commands, (0,0) rejected".into())
}

fn tile_throughput() -> Outcome {
    let tile = Tile::from_rows(64, 128, vec![1; 64 * 128]).map_err(|e| e.to_string())?;
    let x = vec![1i8; 64];
    let k = run_k_flow(&x, &tile).map_err(|e| e.to_string())?;
    let v = run_v_flow(&x, &tile).map_err(|e| e.to_string())?;
    ensure(k.internal_cycles == 64 && v.internal_cycles == 64, || {
        format!("k {} / v {} cycles", k.internal_cycles, v.internal_cycles)
    })?;
    Ok("64 internal cycles per flow".into())
}

fn scheduler(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let mut systems = Vec::new();
    for d in DeviceConfig::PRESETS {
        for m in ModelConfig::PRESETS {
            systems.push(System::preset(d, m).map_err(|e| e.to_string())?);
        }
    }
    for i in 0..500 {
        let sys = &systems[rng.gen_range(0..systems.len())];
        let req = InferenceRequest::new(
            log_uniform(&mut rng, 2048) as u64,
            rng.gen_range(0..=64),
            rng.gen_range(1..=6),
        )
        .map_err(|e| e.to_string())?;
        let h = sys.simulate(ExecMode::Hbcem, &req).map_err(|e| e.to_string())?;
        let l = sys.simulate(ExecMode::Lbim, &req).map_err(|e| e.to_string())?;
        let g = sys.simulate(ExecMode::GpuOnly, &req).map_err(|e| e.to_string())?;
        for rep in [&h, &l, &g] {
            rep.check_invariants().map_err(|e| format!("workload {i} {req:?}: {e}"))?;
        }
        ensure(l.end_to_end_ps <= h.end_to_end_ps, || format!("workload {i}: LBIM slower than HBCEM"))?;
        ensure(req.batch > 1 || l.end_to_end_ps == h.end_to_end_ps, || {
            format!("workload {i}: batch-1 LBIM differs from HBCEM")
        })?;
    }
    Ok("500 workloads valid, LBIM <= HBCEM".into())
}

fn hb_speedup(sys: &System, lin: u64, lout: u64) -> Result<(f64, f64, f64), String> {
    let r = InferenceRequest::new(lin, lout, 1).map_err(|e| e.to_string())?;
    let g = sys.simulate(ExecMode::GpuOnly, &r).map_err(|e| e.to_string())?;
    let h = sys.simulate(ExecMode::Hbcem, &r).map_err(|e| e.to_string())?;
    let reduction = 1.0 - h.mean_decode_s() / g.mean_decode_s();
    Ok((speedup(&h, &g).map_err(|e| e.to_string())?, reduction, h.mean_ttft_s() / h.end_to_end_s))
}

fn with_params(spec: &ExperimentSpec, device: &str, model: &str) -> Result<System, String> {
    let mut s = System::preset(device, model).map_err(|e| e.to_string())?;
    s.params = spec.params;
    s.org = spec.org.clone();
    Ok(s)
}

fn trends(spec: &ExperimentSpec) -> Vec<CheckResult> {
    let sys = |d: &str, m: &str| with_params(spec, d, m);
    vec![
        check("7a", "HBCEM decode reduction", || {
            let (_, red, _) = hb_speedup(&sys("jetson", "llama-1b")?, 128, 2048)?;
            ensure(red >= 0.85, || format!("{:.1}% < 85%", red * 100.0))?;
            Ok(format!("{:.1}% (>= 85%)", red * 100.0))
        }),
        check("7b", "HBCEM speedup by device", || {
            let (j, _, _) = hb_speedup(&sys("jetson", "llama-1b")?, 128, 2048)?;
            let (i, _, _) = hb_speedup(&sys("iphone", "llama-1b")?, 128, 2048)?;
            ensure(i > j && (7.0..=14.0).contains(&j), || format!("jetson {j:.2}x, iphone {i:.2}x"))?;
            Ok(format!("jetson {j:.2}x in [7,14], iphone {i:.2}x"))
        }),
        check("7c", "HBCEM speedup by model", || {
            let reference = [(4.48, 10.51), (6.71, 13.74), (7.47, 14.6)];
            let models = ["llama-1b", "llama-7b", "llama-13b"];
            let mut ranges = [(f64::MAX, f64::MIN); 3];
            for (lin, lout) in [(128, 128), (128, 2048), (2048, 128), (2048, 2048)] {
                let mut prev = 0.0;
                for (mi, m) in models.iter().enumerate() {
                    let (sp, _, _) = hb_speedup(&sys("jetson", m)?, lin, lout)?;
                    ensure(sp >= prev, || format!("{m} {sp:.2}x below smaller model at ({lin},{lout})"))?;
                    prev = sp;
                    ranges[mi] = (ranges[mi].0.min(sp), ranges[mi].1.max(sp));
                }
            }
            for (mi, (lo, hi)) in ranges.iter().enumerate() {
                let (plo, phi) = reference[mi];
                ensure(*lo <= phi && *hi >= plo, || format!("{} range {lo:.2}-{hi:.2}", models[mi]))?;
            }
            Ok(ranges
                .iter()
                .zip(models)
                .map(|((lo, hi), m)| format!("{m} {lo:.2}-{hi:.2}x"))
                .collect::<Vec<_>>()
                .join(", "))
        }),
        check("7d", "LBIM over HBCEM, batch 4", || {
            let mut notes = Vec::new();
            for d in DeviceConfig::PRESETS {
                for m in ModelConfig::PRESETS {
                    let s = sys(d, m)?;
                    let mut series = Vec::new();
                    for lout in [2, 8, 32, 128] {
                        let r = InferenceRequest::new(2048, lout, 4).map_err(|e| e.to_string())?;
                        let h = s.simulate(ExecMode::Hbcem, &r).map_err(|e| e.to_string())?;
                        let l = s.simulate(ExecMode::Lbim, &r).map_err(|e| e.to_string())?;
                        let sp = speedup(&l, &h).map_err(|e| e.to_string())?;
                        ensure((1.0..=1.5).contains(&sp), || format!("{d} {m} Lout={lout}: {sp:.3}"))?;
                        series.push(sp);
                    }
                    if d == "jetson-agx-orin" && m != "llama-1b" {
                        let peak = (0..series.len())
                            .max_by(|&a, &b| series[a].total_cmp(&series[b]))
                            .unwrap_or(0);
                        ensure(peak > 0 && peak < series.len() - 1, || format!("{m} not rise-then-fall: {series:?}"))?;
                        notes.push(format!("{m} peak {:.3}", series[peak]));
                    }
                }
            }
            Ok(format!("all in [1.0,1.5]; {}", notes.join(", ")))
        }),
        check("7e", "TTFT share by device", || {
            let (_, _, j) = hb_speedup(&sys("jetson", "llama-13b")?, 2048, 128)?;
            let (_, _, i) = hb_speedup(&sys("iphone", "llama-13b")?, 2048, 128)?;
            ensure(i > j, || format!("iphone {i:.3} <= jetson {j:.3}"))?;
            Ok(format!("iphone {:.1}% > jetson {:.1}%", i * 100.0, j * 100.0))
        }),
    ]
}

fn overhead() -> Outcome {
    let o = estimate_overhead(&PimOrg::default(), 1);
    ensure((o.total_cu_power_mw - 144.0).abs() < 1e-9, || format!("{} mW", o.total_cu_power_mw))?;
    ensure((o.area_fraction - 0.008).abs() < 1e-12, || format!("area {}", o.area_fraction))?;
    Ok("144 mW, 0.8% die area".into())
}

fn determinism(spec: &ExperimentSpec) -> Outcome {
    let a = table_csv(&run_in_memory(spec).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let b = table_csv(&run_in_memory(spec).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(a == b, || "CSV differs between runs".into())?;
    Ok(format!("{} bytes identical", a.len()))
}

/// Runs every check; `spec` supplies the seed, the calibration and the sweep used for determinism.
pub fn verify(spec: &ExperimentSpec) -> VerifyReport {
    let seed = spec.seed;
    let mut checks = vec![
        check("1", "GEMV oracle equivalence", || gemv_oracle(seed)),
        check("2", "mapping bijection", || bijection(seed)),
        check("3", "bandwidth arithmetic", bandwidths),
        check("4", "instruction table", instructions),
        check("5", "tile throughput", tile_throughput),
        check("6", "scheduler invariants", || scheduler(seed)),
    ];
    checks.extend(trends(spec));
    checks.push(check("8", "overhead reporting", overhead));
    checks.push(check("9", "CSV determinism", || determinism(spec)));
    VerifyReport { seed, checks }
}
