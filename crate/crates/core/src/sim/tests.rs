use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::workload::{total_weight_bytes, OpRole};

fn req(lin: u64, lout: u64, batch: u64) -> InferenceRequest {
    InferenceRequest::new(lin, lout, batch).unwrap()
}

fn sys(device: &str, model: &str) -> System {
    System::preset(device, model).unwrap()
}

#[test]
fn gemm_latency_is_flops_over_throughput() {
    let d = DeviceConfig::jetson_agx_orin();
    assert_eq!(host_gemm_latency(d.compute_throughput, &d, 1.0), 1.0);
    assert_eq!(SimParams::default().gemm_utilization, 0.85);
}

#[test]
fn gemv_latency_is_bandwidth_bound() {
    let j = DeviceConfig::jetson_agx_orin();
    let i = DeviceConfig::iphone_15_pro();
    assert_eq!(host_gemv_latency(204_800_000_000, &j), 1.0);
    assert_eq!(host_gemv_latency(0, &j), 0.0);
    let bytes = total_weight_bytes(&decode_step_ops(&ModelConfig::llama_1b(), 128).unwrap());
    assert_eq!(host_gemv_latency(bytes, &i), 4.0 * host_gemv_latency(bytes, &j));
}

#[test]
fn pim_gemv_half_mode_streams_at_half_rate() {
    let d = DeviceConfig::jetson_agx_orin();
    let org = PimOrg::default();
    let full = pim_gemv_latency(1 << 30, 2048, ComputeMode::Full, &d, &org);
    let half = pim_gemv_latency(1 << 30, 2048, ComputeMode::Half, &d, &org);
    assert_eq!(half.stream_s / full.stream_s, 2.0);
    assert_eq!(half.broadcast_s, full.broadcast_s);
    let empty = pim_gemv_latency(0, 2048, ComputeMode::Full, &d, &org);
    assert_eq!(empty.total(), empty.broadcast_s);

    let ops = decode_step_ops(&ModelConfig::llama_1b(), 2048).unwrap();
    let bytes = total_weight_bytes(&ops);
    let t = pim_gemv_latency(bytes, 0, ComputeMode::Full, &d, &org);
    assert_eq!(t.stream_s, bytes as f64 / 6_553_600_000_000.0);
    assert!((1.4e9..1.5e9).contains(&(bytes as f64)));
}

#[test]
fn op_cycles_follow_layout_passes() {
    let s = sys("jetson", "llama-1b");
    let geom = s.geometry();
    let ops = decode_step_ops(&s.model, 128).unwrap();
    let qkv = ops.iter().find(|o| o.role == OpRole::Qkv).unwrap();
    // 2 row segments x 48 column blocks = 96 passes over 16 dies
    assert_eq!(pim_op_cycles(qkv, &geom), 6 * 64);
    let ctx = ops.iter().find(|o| o.role == OpRole::AttnContext).unwrap();
    assert_eq!(pim_op_cycles(ctx, &geom), 64);
    let host = ops.iter().find(|o| o.role == OpRole::HostNonlinear).unwrap();
    assert_eq!(pim_op_cycles(host, &geom), 0);
}

#[test]
fn zero_output_tokens_is_just_prefill() {
    let s = sys("jetson", "llama-7b");
    let r = req(256, 0, 3);
    let costs = s.cost_table(&r).unwrap();
    for mode in ExecMode::ALL {
        let rep = s.simulate(mode, &r).unwrap();
        rep.check_invariants().unwrap();
        assert_eq!(rep.end_to_end_ps, 3 * costs.prefill_ps, "{mode}");
    }
    let g = s.simulate(ExecMode::GpuOnly, &r).unwrap();
    let h = s.simulate(ExecMode::Hbcem, &r).unwrap();
    assert_eq!(speedup(&h, &g).unwrap(), 1.0);
}

#[test]
fn doubling_bandwidth_halves_gpu_decode() {
    let s = sys("jetson", "llama-1b");
    let mut fast = s.clone();
    fast.device.external_bandwidth *= 2;
    let r = req(128, 64, 1);
    let a = s.simulate(ExecMode::GpuOnly, &r).unwrap().mean_decode_s();
    let b = fast.simulate(ExecMode::GpuOnly, &r).unwrap().mean_decode_s();
    assert!((a / b - 2.0).abs() < 1e-9, "{a} / {b}");
}

#[test]
fn lbim_equals_hbcem_at_batch_one() {
    for (d, m) in [("jetson", "llama-1b"), ("iphone", "llama-13b")] {
        let s = sys(d, m);
        let r = req(512, 40, 1);
        let h = s.simulate(ExecMode::Hbcem, &r).unwrap();
        let l = s.simulate(ExecMode::Lbim, &r).unwrap();
        assert_eq!(h.end_to_end_ps, l.end_to_end_ps);
        assert!(l.mode_switch_log.iter().all(|m| m.to == InstructionKind::PimMacFm));
    }
}

#[test]
fn lbim_overlaps_and_logs_switches() {
    let s = sys("jetson", "llama-7b");
    let r = req(2048, 32, 4);
    let h = s.simulate(ExecMode::Hbcem, &r).unwrap();
    let l = s.simulate(ExecMode::Lbim, &r).unwrap();
    h.check_invariants().unwrap();
    l.check_invariants().unwrap();
    assert!(l.end_to_end_ps < h.end_to_end_ps);
    let kinds: BTreeSet<_> = l.mode_switch_log.iter().map(|m| m.to).collect();
    assert_eq!(kinds.len(), 3);
    assert_eq!(h.mode_switch_log.len(), 1);
    assert_eq!(l.mode_switch_log.last().unwrap().to, InstructionKind::PimMacFm);
    // no processor/PIM overlap in blocked mode
    let proc_end = h.tasks.iter().filter(|t| t.resource == Resource::Processor).map(|t| t.end_ps).max().unwrap();
    let pim_start = h.tasks.iter().filter(|t| t.resource == Resource::Pim).map(|t| t.start_ps).min().unwrap();
    assert!(pim_start >= proc_end);
}

#[test]
fn speedup_rejects_mismatched_workloads() {
    let s = sys("jetson", "llama-1b");
    let a = s.simulate(ExecMode::Hbcem, &req(128, 4, 1)).unwrap();
    let b = s.simulate(ExecMode::Hbcem, &req(128, 5, 1)).unwrap();
    assert_eq!(speedup(&a, &a).unwrap(), 1.0);
    assert!(matches!(speedup(&a, &b), Err(SimError::Mismatch(_))));
}

#[test]
fn report_outputs() {
    let s = sys("iphone", "llama-1b");
    let rep = s.simulate(ExecMode::Lbim, &req(64, 3, 2)).unwrap();
    let mut csv = Vec::new();
    rep.write_timeline_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("resource,start_s,end_s,request,task,instruction\n"));
    assert!(csv.contains(",decode_3,"));
    let mut trace = Vec::new();
    rep.write_instruction_trace(&s.org, &mut trace).unwrap();
    let trace = String::from_utf8(trace).unwrap();
    assert!(trace.starts_with("cycle,kind,sel0,sel1,bank,pbank_roles\n"));
    assert!(trace.contains(",PIM_MAC_FM,1,1,15,"));
    let mut json = Vec::new();
    rep.write_json(&mut json).unwrap();
    let back: LatencyReport = serde_json::from_slice(&json).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn params_are_validated() {
    let zero_eff = SimParams {
        pim_bw_efficiency: 0.0,
        ..SimParams::default()
    };
    assert!(zero_eff.validate().is_err());
    let negative = SimParams {
        handoff_latency_s: -1.0,
        ..SimParams::default()
    };
    assert!(negative.validate().is_err());
    assert!("GPU-only".parse::<ExecMode>().is_ok());
    assert!("cpu".parse::<ExecMode>().is_err());
}

#[test]
fn weight_sharing_never_slows_decode() {
    let mut s = sys("jetson", "llama-1b");
    let r = req(128, 8, 4);
    let serial = s.simulate(ExecMode::Hbcem, &r).unwrap();
    s.params.pim_batch_mode = PimBatchMode::WeightShared;
    let shared = s.simulate(ExecMode::Hbcem, &r).unwrap();
    assert!(shared.end_to_end_ps <= serial.end_to_end_ps);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn schedules_are_valid(
        lin in 1u64..1500,
        lout in 0u64..40,
        batch in 1u64..6,
        dev in 0usize..2,
        model in 0usize..3,
    ) {
        let s = sys(DeviceConfig::PRESETS[dev], ModelConfig::PRESETS[model]);
        let r = req(lin, lout, batch);
        let h = s.simulate(ExecMode::Hbcem, &r).unwrap();
        let l = s.simulate(ExecMode::Lbim, &r).unwrap();
        let g = s.simulate(ExecMode::GpuOnly, &r).unwrap();
        for rep in [&h, &l, &g] {
            rep.check_invariants().unwrap();
        }
        prop_assert!(l.end_to_end_ps <= h.end_to_end_ps);
        if batch == 1 {
            prop_assert_eq!(l.end_to_end_ps, h.end_to_end_ps);
        }
    }
}
