//! Device and PIM organization parameters.
//!
//! Every bandwidth in this module is an integer number of bytes per second so
//! that preset values can be compared bit-exactly.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GIB: u64 = 1 << 30;

/// An edge platform: host compute, external memory interface and DRAM dies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub name: String,
    /// Peak host compute, FLOP/s.
    pub compute_throughput: f64,
    /// External memory bandwidth, bytes/s.
    pub external_bandwidth: u64,
    pub die_count: u32,
    /// Bytes per DRAM die.
    pub die_capacity: u64,
    /// Total memory capacity in bytes; must equal `die_count * die_capacity`.
    pub total_capacity: u64,
    pub pins_per_die: u32,
    /// Per-pin data rate, bits/s.
    pub pin_rate: u64,
}

impl DeviceConfig {
    pub const PRESETS: [&'static str; 2] = ["jetson-agx-orin", "iphone-15-pro"];

    pub fn jetson_agx_orin() -> Self {
        Self::lpddr5_device("jetson-agx-orin", 42.5e12, 16)
    }

    pub fn iphone_15_pro() -> Self {
        Self::lpddr5_device("iphone-15-pro", 4.29e12, 4)
    }

    /// 4 GiB LPDDR5 dies, 16 pins at 6.4 Gb/s each.
    fn lpddr5_device(name: &str, compute_throughput: f64, die_count: u32) -> Self {
        let pins_per_die = 16;
        let pin_rate = 6_400_000_000;
        DeviceConfig {
            name: name.to_string(),
            compute_throughput,
            external_bandwidth: u64::from(die_count) * u64::from(pins_per_die) * pin_rate / 8,
            die_count,
            die_capacity: 4 * GIB,
            total_capacity: u64::from(die_count) * 4 * GIB,
            pins_per_die,
            pin_rate,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "jetson-agx-orin" | "jetson" => Some(Self::jetson_agx_orin()),
            "iphone-15-pro" | "iphone" => Some(Self::iphone_15_pro()),
            _ => None,
        }
    }

    /// Bandwidth implied by the pin configuration, bytes/s.
    pub fn pin_bandwidth(&self) -> u64 {
        u64::from(self.die_count) * u64::from(self.pins_per_die) * self.pin_rate / 8
    }

    /// External bandwidth available to a single die, bytes/s.
    pub fn per_die_bandwidth(&self) -> u64 {
        u64::from(self.pins_per_die) * self.pin_rate / 8
    }
}

/// Organization of the in-DRAM compute resources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PimOrg {
    pub banks_per_die: u32,
    pub pbanks_per_bank: u32,
    pub cus_per_bank: u32,
    /// DRAM core (array) clock, Hz.
    pub internal_clock: u64,
    /// Compute-unit clock, Hz.
    pub cu_clock: u64,
    pub burst_bytes_per_pbank: u32,
    pub input_buffer_bytes: u32,
    pub output_buffer_bytes: u32,
    pub cu_area_um2: f64,
    pub cu_power_mw: f64,
    /// Die area used as the denominator of the CU area fraction.
    #[serde(default = "default_die_area_um2")]
    pub die_area_um2: f64,
}

/// Chosen so that the 32 CUs of one die occupy 0.8% of it.
pub const DEFAULT_DIE_AREA_UM2: f64 = 32.0 * 14_941.0 / 0.008;

fn default_die_area_um2() -> f64 {
    DEFAULT_DIE_AREA_UM2
}

impl Default for PimOrg {
    fn default() -> Self {
        PimOrg {
            banks_per_die: 16,
            pbanks_per_bank: 4,
            cus_per_bank: 2,
            internal_clock: 200_000_000,
            cu_clock: 400_000_000,
            burst_bytes_per_pbank: 32,
            input_buffer_bytes: 64,
            output_buffer_bytes: 128,
            cu_area_um2: 14_941.0,
            cu_power_mw: 4.5,
            die_area_um2: DEFAULT_DIE_AREA_UM2,
        }
    }
}

impl PimOrg {
    /// Weight bytes one bank reads per internal cycle with every pseudo-bank active.
    pub fn bank_bytes_per_cycle(&self) -> u64 {
        u64::from(self.pbanks_per_bank) * u64::from(self.burst_bytes_per_pbank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandwidthSummary {
    pub external: u64,
    pub internal_hbcem: u64,
    pub internal_lbim: u64,
    /// INT8 MAC/s across all compute units.
    pub mac_throughput: u64,
}

pub fn derive_bandwidths(device: &DeviceConfig, org: &PimOrg) -> BandwidthSummary {
    let dies = u64::from(device.die_count);
    let banks = dies * u64::from(org.banks_per_die);
    let internal_hbcem = banks * org.bank_bytes_per_cycle() * org.internal_clock;
    let mac_throughput = banks
        * u64::from(org.cus_per_bank)
        * u64::from(org.burst_bytes_per_pbank)
        * org.cu_clock;
    BandwidthSummary {
        external: device.external_bandwidth,
        internal_hbcem,
        internal_lbim: internal_hbcem / 2,
        mac_throughput,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    ClockRatio,
    PinBandwidthMismatch,
    CapacityMismatch,
    PbankCuRatio,
    NonPositive,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::ClockRatio => "clock ratio",
            ViolationKind::PinBandwidthMismatch => "pin/bandwidth mismatch",
            ViolationKind::CapacityMismatch => "capacity mismatch",
            ViolationKind::PbankCuRatio => "pseudo-bank/CU ratio",
            ViolationKind::NonPositive => "zero or negative parameter",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind}: {field} ({detail})")]
pub struct Violation {
    pub kind: ViolationKind,
    pub field: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ConfigErrors(pub Vec<Violation>);

impl ConfigErrors {
    pub fn has(&self, kind: ViolationKind) -> bool {
        self.0.iter().any(|v| v.kind == kind)
    }
}

/// A device/organization pair that satisfied every invariant at construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedConfig {
    device: DeviceConfig,
    org: PimOrg,
}

impl ValidatedConfig {
    pub fn device(&self) -> &DeviceConfig {
        &self.device
    }

    pub fn org(&self) -> &PimOrg {
        &self.org
    }

    pub fn bandwidths(&self) -> BandwidthSummary {
        derive_bandwidths(&self.device, &self.org)
    }

    pub fn overhead(&self) -> Overhead {
        estimate_overhead(&self.org, self.device.die_count)
    }
}

fn not_positive(x: f64) -> bool {
    x.is_nan() || x <= 0.0
}

pub fn validate(device: DeviceConfig, org: PimOrg) -> Result<ValidatedConfig, ConfigErrors> {
    let mut errs = Vec::new();
    let mut non_positive = |field: &'static str, bad: bool, value: String| {
        if bad {
            errs.push(Violation {
                kind: ViolationKind::NonPositive,
                field,
                detail: value,
            });
        }
    };

    non_positive(
        "compute_throughput",
        not_positive(device.compute_throughput),
        device.compute_throughput.to_string(),
    );
    non_positive("external_bandwidth", device.external_bandwidth == 0, "0".into());
    non_positive("die_count", device.die_count == 0, "0".into());
    non_positive("die_capacity", device.die_capacity == 0, "0".into());
    non_positive("pins_per_die", device.pins_per_die == 0, "0".into());
    non_positive("pin_rate", device.pin_rate == 0, "0".into());
    non_positive("banks_per_die", org.banks_per_die == 0, "0".into());
    non_positive("pbanks_per_bank", org.pbanks_per_bank == 0, "0".into());
    non_positive("cus_per_bank", org.cus_per_bank == 0, "0".into());
    non_positive("internal_clock", org.internal_clock == 0, "0".into());
    non_positive("cu_clock", org.cu_clock == 0, "0".into());
    non_positive(
        "burst_bytes_per_pbank",
        org.burst_bytes_per_pbank == 0,
        "0".into(),
    );
    non_positive("input_buffer_bytes", org.input_buffer_bytes == 0, "0".into());
    non_positive("output_buffer_bytes", org.output_buffer_bytes == 0, "0".into());
    non_positive(
        "cu_area_um2",
        not_positive(org.cu_area_um2),
        org.cu_area_um2.to_string(),
    );
    non_positive(
        "cu_power_mw",
        not_positive(org.cu_power_mw),
        org.cu_power_mw.to_string(),
    );
    non_positive(
        "die_area_um2",
        not_positive(org.die_area_um2),
        org.die_area_um2.to_string(),
    );

    if device.external_bandwidth != device.pin_bandwidth() {
        errs.push(Violation {
            kind: ViolationKind::PinBandwidthMismatch,
            field: "external_bandwidth",
            detail: format!(
                "{} B/s stated, pins give {} B/s",
                device.external_bandwidth,
                device.pin_bandwidth()
            ),
        });
    }
    let capacity = u64::from(device.die_count).checked_mul(device.die_capacity);
    if capacity != Some(device.total_capacity) {
        errs.push(Violation {
            kind: ViolationKind::CapacityMismatch,
            field: "total_capacity",
            detail: format!(
                "{} B stated, dies give {:?} B",
                device.total_capacity, capacity
            ),
        });
    }
    if org.cu_clock != 2 * org.internal_clock {
        errs.push(Violation {
            kind: ViolationKind::ClockRatio,
            field: "cu_clock",
            detail: format!(
                "cu_clock {} Hz must be twice internal_clock {} Hz",
                org.cu_clock, org.internal_clock
            ),
        });
    }
    if org.pbanks_per_bank != 2 * org.cus_per_bank {
        errs.push(Violation {
            kind: ViolationKind::PbankCuRatio,
            field: "pbanks_per_bank",
            detail: format!(
                "{} pseudo-banks for {} CUs",
                org.pbanks_per_bank, org.cus_per_bank
            ),
        });
    }

    if errs.is_empty() {
        Ok(ValidatedConfig { device, org })
    } else {
        Err(ConfigErrors(errs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub total_cu_area_um2: f64,
    /// CU area of one die relative to `die_area_um2`.
    pub area_fraction: f64,
    pub total_cu_power_mw: f64,
}

pub fn estimate_overhead(org: &PimOrg, die_count: u32) -> Overhead {
    let cus_per_die = f64::from(org.cus_per_bank) * f64::from(org.banks_per_die);
    let per_die_area = cus_per_die * org.cu_area_um2;
    Overhead {
        total_cu_area_um2: per_die_area * f64::from(die_count),
        area_fraction: per_die_area / org.die_area_um2,
        total_cu_power_mw: cus_per_die * org.cu_power_mw * f64::from(die_count),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_bandwidths() {
        let j = derive_bandwidths(&DeviceConfig::jetson_agx_orin(), &PimOrg::default());
        assert_eq!(j.external, 204_800_000_000);
        let i = derive_bandwidths(&DeviceConfig::iphone_15_pro(), &PimOrg::default());
        assert_eq!(i.external, 51_200_000_000);
    }

    #[test]
    fn jetson_internal_bandwidth() {
        // 16 dies x 16 banks x 4 pbanks x 32 B x 200 MHz
        let bw = derive_bandwidths(&DeviceConfig::jetson_agx_orin(), &PimOrg::default());
        assert_eq!(bw.internal_hbcem, 6_553_600_000_000);
        assert_eq!(bw.internal_lbim, 3_276_800_000_000);
        assert_eq!(bw.mac_throughput, bw.internal_hbcem);
    }

    #[test]
    fn zero_dies_gives_zero_bandwidth() {
        let mut d = DeviceConfig::jetson_agx_orin();
        d.die_count = 0;
        d.external_bandwidth = 0;
        let bw = derive_bandwidths(&d, &PimOrg::default());
        assert_eq!(
            bw,
            BandwidthSummary {
                external: 0,
                internal_hbcem: 0,
                internal_lbim: 0,
                mac_throughput: 0
            }
        );
    }

    #[test]
    fn presets_validate() {
        for name in DeviceConfig::PRESETS {
            let d = DeviceConfig::preset(name).unwrap();
            validate(d, PimOrg::default()).unwrap();
        }
    }

    #[test]
    fn clock_ratio_rejected() {
        let mut org = PimOrg::default();
        org.cu_clock = org.internal_clock;
        let err = validate(DeviceConfig::jetson_agx_orin(), org).unwrap_err();
        assert!(err.has(ViolationKind::ClockRatio));
        assert!(err.to_string().contains("clock ratio"));
    }

    #[test]
    fn bandwidth_edit_rejected() {
        let mut d = DeviceConfig::jetson_agx_orin();
        d.external_bandwidth = 200_000_000_000;
        let err = validate(d, PimOrg::default()).unwrap_err();
        assert!(err.has(ViolationKind::PinBandwidthMismatch));
        assert!(err.to_string().contains("pin/bandwidth mismatch"));
    }

    #[test]
    fn every_violation_reported() {
        let mut d = DeviceConfig::iphone_15_pro();
        d.external_bandwidth += 1;
        d.total_capacity += 1;
        let mut org = PimOrg::default();
        org.cu_clock += 1;
        org.cus_per_bank = 0;
        let err = validate(d, org).unwrap_err();
        for kind in [
            ViolationKind::PinBandwidthMismatch,
            ViolationKind::CapacityMismatch,
            ViolationKind::ClockRatio,
            ViolationKind::PbankCuRatio,
            ViolationKind::NonPositive,
        ] {
            assert!(err.has(kind), "missing {kind}");
        }
    }

    #[test]
    fn overhead_constants() {
        let o = estimate_overhead(&PimOrg::default(), 1);
        assert_eq!(o.total_cu_power_mw, 144.0);
        assert_eq!(o.total_cu_area_um2, 32.0 * 14_941.0);
        assert!((o.area_fraction - 0.008).abs() < 1e-15);
    }

    #[test]
    fn overhead_without_banks() {
        let org = PimOrg {
            banks_per_die: 0,
            ..PimOrg::default()
        };
        assert_eq!(estimate_overhead(&org, 4).total_cu_power_mw, 0.0);
    }
}
