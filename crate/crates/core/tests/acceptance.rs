//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Reference values are recomputed here from first
//! principles rather than taken from the library.

use std::collections::{HashMap, HashSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use pimsim_core::arch::{derive_bandwidths, estimate_overhead, DeviceConfig, PimOrg};
use pimsim_core::datapath::{run_k_flow, run_k_flow_mode, run_v_flow, run_v_flow_mode, Tile};
use pimsim_core::isa::{
    active_roles, conflict_check, decode, encode, ComputeMode, InstructionKind, PbankId, PbankRole,
};
use pimsim_core::mapping::{map_k, map_v, Geometry, LayoutPlan};
use pimsim_core::report::{run, ExperimentSpec};
use pimsim_core::sim::{ExecMode, LatencyReport, Resource, System, TaskKind};
use pimsim_core::workload::{InferenceRequest, ModelConfig};

const SEED: u64 = 0x00C0_FFEE;

type Outcome = Result<String, String>;

struct Criterion {
    id: &'static str,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn fail<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

/// y[c] = sum_r m[r][c] * x[r], with 64-bit accumulation.
fn naive_gemv(m: &[i8], rows: usize, cols: usize, x: &[i8]) -> Vec<i64> {
    let mut y = vec![0i64; cols];
    for r in 0..rows {
        for c in 0..cols {
            y[c] += i64::from(m[r * cols + c]) * i64::from(x[r]);
        }
    }
    y
}

fn rand_i8(rng: &mut StdRng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.gen()).collect()
}

fn log_uniform(rng: &mut StdRng, max: usize) -> usize {
    let e: f64 = rng.gen_range(0.0..(max as f64).log2());
    (2f64.powf(e).round() as usize).clamp(1, max)
}

fn plan(v_flow: bool, rows: usize, cols: usize, geom: &Geometry) -> LayoutPlan {
    if v_flow { map_v(rows, cols, geom) } else { map_k(rows, cols, geom) }.expect("layout")
}

fn gemv_equivalence() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED);
    let org = PimOrg::default();
    let mut counts = [0usize; 2];
    for v_flow in [false, true] {
        for i in 0..200 {
            let h = rng.gen_range(1..=256);
            let l = rng.gen_range(1..=512);
            let geom = Geometry {
                dies: rng.gen_range(1..=4),
                ..Geometry::single_die(&org)
            };
            let (rows, cols) = if v_flow { (l, h) } else { (h, l) };
            let m = rand_i8(&mut rng, rows * cols);
            let x = rand_i8(&mut rng, rows);
            let out = plan(v_flow, rows, cols, &geom)
                .execute(&m, &x, ComputeMode::Full)
                .map_err(|e| e.to_string())?;
            if out.values != naive_gemv(&m, rows, cols, &x) {
                return fail(format!("instance {i}: {rows}x{cols} v_flow={v_flow} mismatch"));
            }
            counts[usize::from(v_flow)] += 1;
        }
    }
    Ok(format!("{} K-flow and {} V-flow instances bit-exact", counts[0], counts[1]))
}

/// Checks a layout against the matrix it claims to cover.
fn audit_layout(p: &LayoutPlan) -> Result<(), String> {
    let (rows, cols) = p.matrix_dims();
    let mut seen = HashSet::with_capacity(rows * cols);
    let mut addrs = HashSet::with_capacity(p.chunks().len());
    for chunk in p.chunks() {
        if !addrs.insert(chunk.addr) {
            return fail(format!("address {} used twice", chunk.addr));
        }
        if chunk.addr.die != chunk.addr.segment % p.geometry().dies {
            return fail(format!("pass {} on die {}", chunk.addr.segment, chunk.addr.die));
        }
        let mut out_of_bounds = 0;
        for lane in 0..32 {
            let (r, c) = chunk.lane(lane);
            if r < rows && c < cols {
                if !seen.insert((r, c)) {
                    return fail(format!("element ({r},{c}) stored twice"));
                }
            } else {
                out_of_bounds += 1;
            }
        }
        if out_of_bounds != usize::from(chunk.padding_lanes) {
            return fail(format!("chunk at {} flags {} padding lanes, {} out of bounds", chunk.addr, chunk.padding_lanes, out_of_bounds));
        }
    }
    if seen.len() != rows * cols {
        return fail(format!("{} of {} elements stored", seen.len(), rows * cols));
    }
    Ok(())
}

fn mapping_bijection() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED ^ 1);
    let geom = Geometry::single_die(&PimOrg::default());
    let mut mutations = 0;
    for i in 0..100 {
        let v_flow = i % 2 == 1;
        let (rows, cols) = (log_uniform(&mut rng, 4096), log_uniform(&mut rng, 4096));
        let p = plan(v_flow, rows, cols, &geom);
        audit_layout(&p).map_err(|e| format!("{rows}x{cols}: {e}"))?;
        p.verify_bijection().map_err(|e| format!("{rows}x{cols}: {e}"))?;
        for _ in 0..4 {
            let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
            let (addr, lane) = p.locate(r, c).map_err(|e| e.to_string())?;
            let hit = p.elements_at(&addr).map_err(|e| e.to_string())?;
            if (hit[lane].row, hit[lane].col) != (r, c) || hit[lane].is_padding {
                return fail(format!("locate({r},{c}) round trip failed"));
            }
        }
        if p.chunks().len() > 1 {
            let bad = p.perturbed();
            if audit_layout(&bad).is_ok() || bad.verify_bijection().is_ok() {
                return fail(format!("{rows}x{cols}: perturbed layout accepted"));
            }
            mutations += 1;
        }
    }
    // Ragged shapes: padded lanes must not leak into any output column.
    for (rows, cols) in [(33, 65), (65, 31), (1, 1), (100, 129)] {
        for v_flow in [false, true] {
            let m = vec![-128i8; rows * cols];
            let x = vec![-128i8; rows];
            let out = plan(v_flow, rows, cols, &geom)
                .execute(&m, &x, ComputeMode::Full)
                .map_err(|e| e.to_string())?;
            if out.values != vec![rows as i64 * 16384; cols] {
                return fail(format!("padding leaked for {rows}x{cols}"));
            }
        }
    }
    Ok(format!("100 shapes exact cover, {mutations} mutations rejected, padding inert"))
}

fn bandwidth() -> Outcome {
    let org = PimOrg::default();
    for (dev, dies, ext_gbps) in [(DeviceConfig::jetson_agx_orin(), 16u64, 204.8), (DeviceConfig::iphone_15_pro(), 4, 51.2)] {
        let bw = derive_bandwidths(&dev, &org);
        let pin_ext = dies * 16 * 6_400_000_000 / 8;
        let internal = dies * 16 * 4 * 32 * 200_000_000;
        if bw.external != pin_ext || (bw.external as f64 / 1e9 - ext_gbps).abs() > 1e-9 {
            return fail(format!("{} external {}", dev.name, bw.external));
        }
        if bw.internal_hbcem != internal || bw.internal_lbim * 2 != internal {
            return fail(format!("{} internal {} / {}", dev.name, bw.internal_hbcem, bw.internal_lbim));
        }
    }
    let j = derive_bandwidths(&DeviceConfig::jetson_agx_orin(), &org);
    if j.internal_hbcem != 6_553_600_000_000 {
        return fail("jetson internal bandwidth");
    }
    Ok("204.8 / 51.2 GB/s external, 6553.6 / 3276.8 GB/s internal".into())
}

fn instruction_table() -> Outcome {
    use PbankRole::{HostAccess as H, PimCompute as P};
    let expected = [
        (InstructionKind::PimMacFm, (1, 1), [P, P, P, P]),
        (InstructionKind::MactLdb, (0, 1), [P, P, H, H]),
        (InstructionKind::MacbLdt, (1, 0), [H, H, P, P]),
    ];
    let pbanks = [PbankId::TL, PbankId::TR, PbankId::BL, PbankId::BR];
    for (kind, bits, roles) in expected {
        if encode(kind) != bits || decode(bits.0, bits.1) != Ok(kind) {
            return fail(format!("{kind} encoding"));
        }
        let table = active_roles(kind);
        for (pb, role) in pbanks.iter().zip(roles) {
            if table.role(*pb) != role {
                return fail(format!("{kind} {pb} role"));
            }
            if conflict_check(kind, *pb).is_ok() != (role == H) {
                return fail(format!("{kind} host access to {pb}"));
            }
        }
    }
    if decode(0, 0).is_ok() {
        return fail("(0,0) decoded");
    }
    Ok("3 encodings, role partitions and host conflicts match".into())
}

fn tile_throughput() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED ^ 5);
    let m = rand_i8(&mut rng, 64 * 128);
    let x = rand_i8(&mut rng, 64);
    let tile = Tile::from_rows(64, 128, m.clone()).map_err(|e| e.to_string())?;
    let want: Vec<i64> = naive_gemv(&m, 64, 128, &x);
    for (name, full, half) in [
        ("k", run_k_flow(&x, &tile), run_k_flow_mode(&x, &tile, ComputeMode::Half)),
        ("v", run_v_flow(&x, &tile), run_v_flow_mode(&x, &tile, ComputeMode::Half)),
    ] {
        let (full, half) = (full.map_err(|e| e.to_string())?, half.map_err(|e| e.to_string())?);
        if full.internal_cycles != 64 || half.internal_cycles != 128 {
            return fail(format!("{name}: {} / {} cycles", full.internal_cycles, half.internal_cycles));
        }
        let got: Vec<i64> = full.values.iter().map(|&v| i64::from(v)).collect();
        if got != want || half.values != full.values {
            return fail(format!("{name}: tile result differs"));
        }
    }
    Ok("64x128 tile in 64 cycles (128 in half mode) for both flows".into())
}

/// Recomputes schedule validity from the task list alone.
fn audit_schedule(rep: &LatencyReport, req: &InferenceRequest) -> Result<(), String> {
    let by_id: HashMap<usize, _> = rep.tasks.iter().map(|t| (t.id, t)).collect();
    let mut per_resource: HashMap<Resource, Vec<(u64, u64)>> = HashMap::new();
    let mut tokens: HashMap<usize, Vec<(u64, u64, u64)>> = HashMap::new();
    let mut prefills = HashMap::new();
    for t in &rep.tasks {
        if t.end_ps < t.start_ps {
            return fail(format!("task {} ends before it starts", t.id));
        }
        for d in &t.depends_on {
            let dep = by_id.get(d).ok_or_else(|| format!("task {} depends on missing {d}", t.id))?;
            if dep.end_ps > t.start_ps {
                return fail(format!("task {} starts before dependency {d} ends", t.id));
            }
        }
        per_resource.entry(t.resource).or_default().push((t.start_ps, t.end_ps));
        match t.kind {
            TaskKind::Prefill => {
                prefills.insert(t.request, t.end_ps);
            }
            TaskKind::DecodeToken { step } => tokens.entry(t.request).or_default().push((step, t.start_ps, t.end_ps)),
        }
    }
    for (res, mut spans) in per_resource {
        spans.sort();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return fail(format!("{res} runs two tasks at once"));
        }
    }
    if prefills.len() as u64 != req.batch {
        return fail("prefill count");
    }
    for r in 0..req.batch as usize {
        let mut toks = tokens.remove(&r).unwrap_or_default();
        toks.sort();
        if toks.len() as u64 != req.lout || toks.iter().enumerate().any(|(i, t)| t.0 != i as u64 + 1) {
            return fail(format!("request {r} token steps"));
        }
        let mut prev = prefills[&r];
        for &(_, s, e) in &toks {
            if s < prev {
                return fail(format!("request {r} token out of order"));
            }
            prev = e;
        }
    }
    let last = rep.tasks.iter().map(|t| t.end_ps).max().unwrap_or(0);
    if rep.end_to_end_ps != last {
        return fail("end-to-end latency is not the last task end");
    }
    Ok(())
}

fn scheduler() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED ^ 6);
    let systems: Vec<System> = DeviceConfig::PRESETS
        .iter()
        .flat_map(|d| ModelConfig::PRESETS.iter().map(move |m| System::preset(d, m).unwrap()))
        .collect();
    let mut overlapped = 0;
    for i in 0..500 {
        let sys = &systems[rng.gen_range(0..systems.len())];
        let req = InferenceRequest::new(log_uniform(&mut rng, 2048) as u64, rng.gen_range(0..=48), rng.gen_range(1..=6))
            .map_err(|e| e.to_string())?;
        let reps: Vec<LatencyReport> = ExecMode::ALL
            .iter()
            .map(|&m| sys.simulate(m, &req).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        for rep in &reps {
            audit_schedule(rep, &req).map_err(|e| format!("workload {i} {} {req:?}: {e}", rep.mode))?;
        }
        let (h, l) = (&reps[1], &reps[2]);
        if l.end_to_end_ps > h.end_to_end_ps {
            return fail(format!("workload {i}: LBIM slower than HBCEM"));
        }
        if req.batch == 1 && l.end_to_end_ps != h.end_to_end_ps {
            return fail(format!("workload {i}: batch-1 LBIM differs from HBCEM"));
        }
        if l.end_to_end_ps < h.end_to_end_ps {
            overlapped += 1;
        }
    }
    Ok(format!("500 workloads x 3 modes valid, LBIM faster on {overlapped}, equal at batch 1, never slower"))
}

struct Point {
    speedup: f64,
    decode_reduction: f64,
    ttft_share: f64,
}

fn point(device: &str, model: &str, lin: u64, lout: u64) -> Point {
    let sys = System::preset(device, model).unwrap();
    let req = InferenceRequest::new(lin, lout, 1).unwrap();
    let g = sys.simulate(ExecMode::GpuOnly, &req).unwrap();
    let h = sys.simulate(ExecMode::Hbcem, &req).unwrap();
    Point {
        speedup: g.end_to_end_ps as f64 / h.end_to_end_ps as f64,
        decode_reduction: 1.0 - h.mean_decode_s() / g.mean_decode_s(),
        ttft_share: h.mean_ttft_s() / h.end_to_end_s,
    }
}

fn decode_reduction() -> Outcome {
    let p = point("jetson-agx-orin", "llama-1b", 128, 2048);
    if p.decode_reduction < 0.85 {
        return fail(format!("{:.1}% < 85%", p.decode_reduction * 100.0));
    }
    Ok(format!("{:.1}% decode latency reduction", p.decode_reduction * 100.0))
}

fn device_speedup() -> Outcome {
    let j = point("jetson-agx-orin", "llama-1b", 128, 2048).speedup;
    let i = point("iphone-15-pro", "llama-1b", 128, 2048).speedup;
    if !(7.0..=14.0).contains(&j) || i <= j {
        return fail(format!("jetson {j:.2}x, iphone {i:.2}x"));
    }
    Ok(format!("jetson {j:.2}x, iphone {i:.2}x"))
}

fn model_speedup() -> Outcome {
    let reference = [("llama-1b", 4.48, 10.51), ("llama-7b", 6.71, 13.74), ("llama-13b", 7.47, 14.6)];
    let points = [(128, 128), (128, 2048), (2048, 128), (2048, 2048)];
    let mut summary = Vec::new();
    let mut grid = Vec::new();
    for (model, lo_ref, hi_ref) in reference {
        let s: Vec<f64> = points.iter().map(|&(a, b)| point("jetson-agx-orin", model, a, b).speedup).collect();
        let (lo, hi) = (s.iter().cloned().fold(f64::MAX, f64::min), s.iter().cloned().fold(0.0, f64::max));
        if lo > hi_ref || hi < lo_ref {
            return fail(format!("{model} {lo:.2}-{hi:.2}x misses {lo_ref}-{hi_ref}x"));
        }
        summary.push(format!("{model} {lo:.2}-{hi:.2}x"));
        grid.push(s);
    }
    for (pi, pt) in points.iter().enumerate() {
        if !(grid[0][pi] <= grid[1][pi] && grid[1][pi] <= grid[2][pi]) {
            return fail(format!("ordering broken at {pt:?}"));
        }
    }
    Ok(summary.join(", "))
}

fn lbim_speedup() -> Outcome {
    let mut notes = Vec::new();
    for device in DeviceConfig::PRESETS {
        for model in ModelConfig::PRESETS {
            let sys = System::preset(device, model).unwrap();
            let series: Vec<f64> = [2, 8, 32, 128]
                .iter()
                .map(|&lout| {
                    let req = InferenceRequest::new(2048, lout, 4).unwrap();
                    let h = sys.simulate(ExecMode::Hbcem, &req).unwrap();
                    let l = sys.simulate(ExecMode::Lbim, &req).unwrap();
                    h.end_to_end_ps as f64 / l.end_to_end_ps as f64
                })
                .collect();
            if series.iter().any(|s| !(1.0..=1.5).contains(s)) {
                return fail(format!("{device} {model}: {series:.3?}"));
            }
            if device == "jetson-agx-orin" && model != "llama-1b" {
                let peak = series.iter().cloned().fold(0.0, f64::max);
                let monotonic = series.windows(2).all(|w| w[1] >= w[0]);
                if monotonic || series[0] == peak || series[3] == peak {
                    return fail(format!("{model} not rise-then-fall: {series:.3?}"));
                }
                notes.push(format!("{model} peak {peak:.3}"));
            }
        }
    }
    Ok(format!("all points in [1.0,1.5], {}", notes.join(", ")))
}

fn ttft_share() -> Outcome {
    let j = point("jetson-agx-orin", "llama-13b", 2048, 128).ttft_share;
    let i = point("iphone-15-pro", "llama-13b", 2048, 128).ttft_share;
    if i <= j {
        return fail(format!("iphone {i:.3} <= jetson {j:.3}"));
    }
    Ok(format!("iphone {:.1}% vs jetson {:.1}%", i * 100.0, j * 100.0))
}

fn overhead() -> Outcome {
    let org = PimOrg::default();
    let o = estimate_overhead(&org, 1);
    let cus = 16.0 * 2.0;
    if (o.total_cu_power_mw - 144.0).abs() > 1e-9 || (cus * org.cu_power_mw - 144.0).abs() > 1e-9 {
        return fail(format!("{} mW", o.total_cu_power_mw));
    }
    if (o.area_fraction - 0.008).abs() > 1e-12 || (o.total_cu_area_um2 - cus * org.cu_area_um2).abs() > 1e-6 {
        return fail(format!("area fraction {}", o.area_fraction));
    }
    Ok(format!("{} mW per die, {:.1}% die area", o.total_cu_power_mw, o.area_fraction * 100.0))
}

fn determinism() -> Outcome {
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let spec = ExperimentSpec {
            out_dir: dir.path().to_path_buf(),
            seed: 7,
            ..ExperimentSpec::default()
        };
        run(&spec).map_err(|e| e.to_string())?;
        let csv = std::fs::read(dir.path().join("results.csv")).map_err(|e| e.to_string())?;
        let json = std::fs::read(dir.path().join("results.json")).map_err(|e| e.to_string())?;
        files.push((csv, json));
    }
    if files[0] != files[1] {
        return fail("outputs differ between identical runs");
    }
    let header = "device,model,mode,lin,lout,batch,ttft_s,decode_s,end_to_end_s,speedup_vs_baseline,internal_bw_used,pim_utilization\n";
    if !files[0].0.starts_with(header.as_bytes()) {
        return fail("unexpected CSV header");
    }
    Ok(format!("results.csv ({} B) and results.json byte-identical", files[0].0.len()))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: "1", name: "GEMV equivalence", budget: Some(Duration::from_secs(30)), run: gemv_equivalence },
        Criterion { id: "2", name: "mapping bijection", budget: Some(Duration::from_secs(10)), run: mapping_bijection },
        Criterion { id: "3", name: "bandwidth arithmetic", budget: None, run: bandwidth },
        Criterion { id: "4", name: "instruction table", budget: None, run: instruction_table },
        Criterion { id: "5", name: "tile throughput", budget: None, run: tile_throughput },
        Criterion { id: "6", name: "scheduler invariants", budget: Some(Duration::from_secs(60)), run: scheduler },
        Criterion { id: "7a", name: "HBCEM decode reduction", budget: None, run: decode_reduction },
        Criterion { id: "7b", name: "HBCEM speedup by device", budget: None, run: device_speedup },
        Criterion { id: "7c", name: "HBCEM speedup by model", budget: None, run: model_speedup },
        Criterion { id: "7d", name: "LBIM speedup at batch 4", budget: None, run: lbim_speedup },
        Criterion { id: "7e", name: "TTFT share by device", budget: None, run: ttft_share },
        Criterion { id: "8", name: "overhead reporting", budget: None, run: overhead },
        Criterion { id: "9", name: "CSV determinism", budget: None, run: determinism },
    ];
    let mut failures = 0;
    for c in criteria {
        let start = Instant::now();
        let mut result = (c.run)();
        let elapsed = start.elapsed();
        if let (Ok(_), Some(budget)) = (&result, c.budget) {
            if elapsed > budget {
                result = Err(format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), budget.as_secs()));
            }
        }
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {:<3} {:<26} {detail} [{:.2}s]", c.id, c.name, elapsed.as_secs_f64());
    }
    println!("acceptance: {failures} failing");
    if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
