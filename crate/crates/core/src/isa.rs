//! PIM command encodings, pseudo-bank roles and per-tile cycle accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("unmapped encoding: SEL0={sel0} SEL1={sel1}")]
    UnmappedEncoding { sel0: u8, sel1: u8 },
    #[error("select bit out of range: {0}")]
    InvalidBit(u8),
    #[error("pbank busy: reserved for PIM compute ({pbank} under {kind})")]
    PbankBusy { pbank: PbankId, kind: InstructionKind },
    #[error("tile {rows}x{cols} exceeds buffer capacity for {flow:?} (max {max_rows}x{max_cols})")]
    TileTooLarge {
        rows: usize,
        cols: usize,
        flow: Flow,
        max_rows: usize,
        max_cols: usize,
    },
    #[error("unknown instruction {0:?}")]
    UnknownInstruction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstructionKind {
    /// All four pseudo-banks feed both CUs.
    PimMacFm,
    /// Top CU computes, host owns the bottom pseudo-banks.
    MactLdb,
    /// Bottom CU computes, host owns the top pseudo-banks.
    MacbLdt,
}

impl InstructionKind {
    pub const ALL: [InstructionKind; 3] = [
        InstructionKind::PimMacFm,
        InstructionKind::MactLdb,
        InstructionKind::MacbLdt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            InstructionKind::PimMacFm => "PIM_MAC_FM",
            InstructionKind::MactLdb => "MACT_LDB",
            InstructionKind::MacbLdt => "MACB_LDT",
        }
    }

    pub fn mode(self) -> ComputeMode {
        match self {
            InstructionKind::PimMacFm => ComputeMode::Full,
            InstructionKind::MactLdb | InstructionKind::MacbLdt => ComputeMode::Half,
        }
    }
}

impl fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl FromStr for InstructionKind {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InstructionKind::ALL
            .into_iter()
            .find(|k| k.mnemonic().eq_ignore_ascii_case(s))
            .ok_or_else(|| IsaError::UnknownInstruction(s.to_string()))
    }
}

/// SEL0/SEL1 pair selecting which pseudo-banks feed the CUs.
pub fn encode(kind: InstructionKind) -> (u8, u8) {
    match kind {
        InstructionKind::PimMacFm => (1, 1),
        InstructionKind::MactLdb => (0, 1),
        InstructionKind::MacbLdt => (1, 0),
    }
}

/// (0, 0) means "no PIM operation" and is rejected.
pub fn decode(sel0: u8, sel1: u8) -> Result<InstructionKind, IsaError> {
    for bit in [sel0, sel1] {
        if bit > 1 {
            return Err(IsaError::InvalidBit(bit));
        }
    }
    match (sel0, sel1) {
        (1, 1) => Ok(InstructionKind::PimMacFm),
        (0, 1) => Ok(InstructionKind::MactLdb),
        (1, 0) => Ok(InstructionKind::MacbLdt),
        _ => Err(IsaError::UnmappedEncoding { sel0, sel1 }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PbankId {
    TL,
    TR,
    BL,
    BR,
}

impl PbankId {
    pub const ALL: [PbankId; 4] = [PbankId::TL, PbankId::TR, PbankId::BL, PbankId::BR];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<PbankId> {
        PbankId::ALL.get(i).copied()
    }

    pub fn is_top(self) -> bool {
        matches!(self, PbankId::TL | PbankId::TR)
    }

    /// CU fed by this pseudo-bank's global sense amplifiers.
    pub fn cu(self) -> CuSide {
        if self.is_top() {
            CuSide::Top
        } else {
            CuSide::Bottom
        }
    }
}

impl fmt::Display for PbankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CuSide {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbankRole {
    PimCompute,
    HostAccess,
    Idle,
}

impl fmt::Display for PbankRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PbankRole::PimCompute => "pim_compute",
            PbankRole::HostAccess => "host_access",
            PbankRole::Idle => "idle",
        })
    }
}

/// Role of each pseudo-bank of a bank, indexed by [`PbankId::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTable([PbankRole; 4]);

impl RoleTable {
    /// Normal DRAM operation: the host may touch every pseudo-bank.
    pub fn host_only() -> Self {
        RoleTable([PbankRole::HostAccess; 4])
    }

    pub fn role(&self, pbank: PbankId) -> PbankRole {
        self.0[pbank.index()]
    }

    pub fn with_role(&self, role: PbankRole) -> impl Iterator<Item = PbankId> + '_ {
        PbankId::ALL.into_iter().filter(move |&p| self.role(p) == role)
    }

    pub fn apply(&mut self, kind: InstructionKind) {
        *self = active_roles(kind);
    }
}

impl fmt::Display for RoleTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in PbankId::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{}={}", p, self.role(*p))?;
        }
        Ok(())
    }
}

pub fn active_roles(kind: InstructionKind) -> RoleTable {
    use PbankRole::*;
    RoleTable(match kind {
        InstructionKind::PimMacFm => [PimCompute; 4],
        InstructionKind::MactLdb => [PimCompute, PimCompute, HostAccess, HostAccess],
        InstructionKind::MacbLdt => [HostAccess, HostAccess, PimCompute, PimCompute],
    })
}

pub fn conflict_check(kind: InstructionKind, host_request: PbankId) -> Result<(), IsaError> {
    match active_roles(kind).role(host_request) {
        PbankRole::PimCompute => Err(IsaError::PbankBusy {
            pbank: host_request,
            kind,
        }),
        PbankRole::HostAccess | PbankRole::Idle => Ok(()),
    }
}

/// Outer-product flow over K-cache style tiles, or inner-product flow over V-cache tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    KFlow,
    VFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeMode {
    Full,
    Half,
}

impl ComputeMode {
    /// Weight bytes (== MACs) one bank retires per internal cycle.
    pub fn macs_per_bank_cycle(self) -> u64 {
        match self {
            ComputeMode::Full => 128,
            ComputeMode::Half => 64,
        }
    }

    pub fn slowdown(self) -> u64 {
        match self {
            ComputeMode::Full => 1,
            ComputeMode::Half => 2,
        }
    }
}

/// Input rows and output columns one bank can hold for a single tile pass.
pub const TILE_ROWS: usize = 64;
pub const TILE_COLS: usize = 128;

/// Internal-clock cycles one bank spends on a `rows x cols` weight tile.
pub fn gemv_tile_cycles(
    rows: usize,
    cols: usize,
    flow: Flow,
    mode: ComputeMode,
) -> Result<u64, IsaError> {
    if rows > TILE_ROWS || cols > TILE_COLS {
        return Err(IsaError::TileTooLarge {
            rows,
            cols,
            flow,
            max_rows: TILE_ROWS,
            max_cols: TILE_COLS,
        });
    }
    let macs = (rows * cols) as u64;
    // a half-mode bank runs the full-mode schedule on one CU
    Ok(macs.div_ceil(ComputeMode::Full.macs_per_bank_cycle()) * mode.slowdown())
}

/// One line of an instruction trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub kind: InstructionKind,
    pub bank: u32,
}

impl TraceRecord {
    pub const HEADER: &'static str = "cycle,kind,sel0,sel1,bank,pbank_roles";
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (s0, s1) = encode(self.kind);
        write!(
            f,
            "{},{},{},{},{},{}",
            self.cycle,
            self.kind,
            s0,
            s1,
            self.bank,
            active_roles(self.kind)
        )
    }
}
