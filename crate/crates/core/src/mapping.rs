//! Chunk-level placement of K-cache and V-cache matrices.
//!
//! A K-cache matrix (`h_dim x L`) is cut into 1x32 row chunks. One die pass
//! covers 64 rows per bank (1024 rows on a 16-bank die) and 128 columns, 32
//! per pseudo-bank, so a bank streams a full 128-wide row each internal
//! cycle. A V-cache matrix (`L x h_dim`) is cut into 32x1 column chunks. One
//! die pass covers 64 rows and 128 columns per bank (2048 on a 16-bank die);
//! the top CU reduces columns `0..64` of the bank tile and the bottom CU
//! columns `64..128`, one column each per internal cycle.
//!
//! Passes that do not fit one die tile are dealt round-robin over dies.
//! Chunks exist only where they hold at least one matrix element; lanes that
//! run past the matrix edge are zero and reported as padding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{DeviceConfig, PimOrg, GIB};
use crate::datapath::{self, ChunkOrientation, CuError, Tile, CHUNK_BYTES, INPUT_BUFFER_BYTES};
use crate::isa::{ComputeMode, CuSide, Flow, PbankId, TILE_COLS, TILE_ROWS};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("matrix dimensions must be at least 1x1, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("layout needs {needed} bytes on one die but a die holds {capacity}")]
    CapacityExceeded { needed: u64, capacity: u64 },
    #[error("geometry has no dies or no banks")]
    NoBanks,
    #[error("address {0} is not part of this layout")]
    UnknownAddress(ChunkAddr),
    #[error("element ({row}, {col}) lies outside the {rows}x{cols} matrix")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{what} has {got} elements, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("bijection violated: {0}")]
    Bijection(String),
    #[error(transparent)]
    Datapath(#[from] CuError),
    #[error("layout dump failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Die and bank counts a layout is spread over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub dies: u32,
    pub banks_per_die: u32,
    pub die_capacity: u64,
}

impl Geometry {
    pub fn new(device: &DeviceConfig, org: &PimOrg) -> Self {
        Geometry {
            dies: device.die_count,
            banks_per_die: org.banks_per_die,
            die_capacity: device.die_capacity,
        }
    }

    pub fn single_die(org: &PimOrg) -> Self {
        Geometry {
            dies: 1,
            banks_per_die: org.banks_per_die,
            die_capacity: 4 * GIB,
        }
    }

    /// Rows of a K-cache matrix one die pass covers.
    pub fn k_pass_rows(&self) -> usize {
        TILE_ROWS * self.banks_per_die as usize
    }

    /// Columns of a V-cache matrix one die pass covers.
    pub fn v_pass_cols(&self) -> usize {
        TILE_COLS * self.banks_per_die as usize
    }

    fn banks(&self) -> usize {
        self.banks_per_die as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkAddr {
    pub die: u32,
    /// Global pass index; pass `p` runs on die `p % dies`.
    pub segment: u32,
    pub bank: u32,
    pub pbank: PbankId,
    pub cycle_slot: u32,
    pub orientation: ChunkOrientation,
}

impl fmt::Display for ChunkAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "die{}/seg{}/bank{}/{}/slot{}",
            self.die, self.segment, self.bank, self.pbank, self.cycle_slot
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub addr: ChunkAddr,
    /// Matrix coordinate held by lane 0.
    pub origin: (usize, usize),
    /// Trailing lanes that fall outside the matrix.
    pub padding_lanes: u8,
}

impl ChunkEntry {
    pub fn lane(&self, i: usize) -> (usize, usize) {
        let (r, c) = self.origin;
        match self.addr.orientation {
            ChunkOrientation::RowChunk => (r, c + i),
            ChunkOrientation::ColChunk => (r + i, c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementRef {
    pub row: usize,
    pub col: usize,
    pub is_padding: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Destination {
    pub die: u32,
    pub bank: u32,
    pub cu: CuSide,
}

/// A 64-element slice of an input vector and the CU input buffers it is copied into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSlice {
    pub segment: u32,
    /// `None` when the slice goes to every bank.
    pub bank: Option<u32>,
    pub start: usize,
    /// Lanes past `valid` are zero.
    pub valid: usize,
    pub destinations: Vec<Destination>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BroadcastPlan {
    pub input_len: usize,
    pub slices: Vec<InputSlice>,
}

impl BroadcastPlan {
    pub fn segments(&self) -> usize {
        self.slices
            .iter()
            .map(|s| s.segment)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn slice_for(&self, segment: u32, bank: u32) -> Option<&InputSlice> {
        self.slices
            .iter()
            .find(|s| s.segment == segment && s.bank.is_none_or(|b| b == bank))
    }

    /// Input-buffer contents for `slice`, zero-padded to 64 bytes.
    pub fn gather(&self, slice: &InputSlice, input: &[i8]) -> Vec<i8> {
        let mut buf = vec![0i8; INPUT_BUFFER_BYTES];
        let end = (slice.start + slice.valid).min(input.len());
        if slice.start < end {
            buf[..end - slice.start].copy_from_slice(&input[slice.start..end]);
        }
        buf
    }
}

fn both_cus(die: u32, bank: u32) -> [Destination; 2] {
    [CuSide::Top, CuSide::Bottom].map(|cu| Destination { die, bank, cu })
}

/// Splits the query vector into one 64-element slice per bank of each
/// die-pass segment; each slice feeds both CUs of its bank.
pub fn plan_q_broadcast(q_len: usize, geom: &Geometry) -> BroadcastPlan {
    let seg_len = geom.k_pass_rows();
    let mut slices = Vec::new();
    for seg in 0..q_len.div_ceil(seg_len) {
        for bank in 0..geom.banks_per_die {
            let start = seg * seg_len + bank as usize * INPUT_BUFFER_BYTES;
            let valid = q_len.saturating_sub(start).min(INPUT_BUFFER_BYTES);
            let destinations = (0..geom.dies).flat_map(|d| both_cus(d, bank)).collect();
            slices.push(InputSlice {
                segment: seg as u32,
                bank: Some(bank),
                start,
                valid,
                destinations,
            });
        }
    }
    BroadcastPlan {
        input_len: q_len,
        slices,
    }
}

/// Splits the attention-score vector into 64-element sub-vectors, each sent to every CU.
pub fn plan_attn_broadcast(l: usize, geom: &Geometry) -> BroadcastPlan {
    let slices = (0..l.div_ceil(INPUT_BUFFER_BYTES))
        .map(|i| {
            let start = i * INPUT_BUFFER_BYTES;
            InputSlice {
                segment: i as u32,
                bank: None,
                start,
                valid: (l - start).min(INPUT_BUFFER_BYTES),
                destinations: (0..geom.dies)
                    .flat_map(|d| (0..geom.banks_per_die).flat_map(move |b| both_cus(d, b)))
                    .collect(),
            }
        })
        .collect();
    BroadcastPlan {
        input_len: l,
        slices,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BijectionReport {
    pub elements: usize,
    pub chunks: usize,
    pub padding_lanes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub passes: usize,
    /// Bank slots over every die-round, occupied or not.
    pub bank_slots: usize,
    pub occupied_bank_passes: usize,
    pub idle_bank_passes: usize,
    /// CUs in occupied bank passes that hold at least one chunk.
    pub active_cus: usize,
    pub cus_in_occupied_banks: usize,
    pub valid_lane_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOutput {
    pub values: Vec<i64>,
    /// Internal cycles until the slowest die finishes its passes.
    pub die_cycles: u64,
    pub bank_passes: usize,
    pub weight_bytes: u64,
}

#[derive(Debug, Serialize)]
struct LayoutRow {
    element_row: usize,
    element_col: usize,
    die: u32,
    bank: u32,
    pbank: PbankId,
    segment: u32,
    cycle_slot: u32,
    is_padding: bool,
}

/// Immutable chunk placement of one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPlan {
    flow: Flow,
    rows: usize,
    cols: usize,
    geometry: Geometry,
    chunks: Vec<ChunkEntry>,
    broadcast: BroadcastPlan,
}

fn check_dims(rows: usize, cols: usize, geom: &Geometry) -> Result<(), MappingError> {
    if rows == 0 || cols == 0 {
        return Err(MappingError::EmptyMatrix { rows, cols });
    }
    if geom.dies == 0 || geom.banks_per_die == 0 {
        return Err(MappingError::NoBanks);
    }
    Ok(())
}

fn check_capacity(passes: usize, geom: &Geometry) -> Result<(), MappingError> {
    let rounds = passes.div_ceil(geom.dies as usize) as u64;
    let needed = rounds * geom.banks_per_die as u64 * (TILE_ROWS * TILE_COLS) as u64;
    if needed > geom.die_capacity {
        return Err(MappingError::CapacityExceeded {
            needed,
            capacity: geom.die_capacity,
        });
    }
    Ok(())
}

fn v_pbank(top: bool, upper_half: bool) -> PbankId {
    match (top, upper_half) {
        (true, false) => PbankId::TL,
        (true, true) => PbankId::TR,
        (false, false) => PbankId::BL,
        (false, true) => PbankId::BR,
    }
}

/// Die passes a `rows x cols` matrix needs under `flow`'s layout, without building the plan.
pub fn pass_count(flow: Flow, rows: usize, cols: usize, geom: &Geometry) -> usize {
    match flow {
        Flow::KFlow => rows.div_ceil(geom.k_pass_rows()) * cols.div_ceil(TILE_COLS),
        Flow::VFlow => rows.div_ceil(TILE_ROWS) * cols.div_ceil(geom.v_pass_cols()),
    }
}

/// Places an `h_dim x l` K-cache matrix for the outer-product flow.
pub fn map_k(h_dim: usize, l: usize, geom: &Geometry) -> Result<LayoutPlan, MappingError> {
    check_dims(h_dim, l, geom)?;
    let pass_rows = geom.k_pass_rows();
    let n_cb = l.div_ceil(TILE_COLS);
    let passes = h_dim.div_ceil(pass_rows) * n_cb;
    check_capacity(passes, geom)?;

    let mut chunks = Vec::with_capacity(h_dim * l.div_ceil(CHUNK_BYTES));
    for p in 0..passes {
        let (seg, cb) = (p / n_cb, p % n_cb);
        for bank in 0..geom.banks() {
            let r0 = seg * pass_rows + bank * TILE_ROWS;
            for slot in 0..TILE_ROWS.min(h_dim.saturating_sub(r0)) {
                for pb in PbankId::ALL {
                    let c0 = cb * TILE_COLS + pb.index() * CHUNK_BYTES;
                    if c0 >= l {
                        break;
                    }
                    chunks.push(ChunkEntry {
                        addr: ChunkAddr {
                            die: (p % geom.dies as usize) as u32,
                            segment: p as u32,
                            bank: bank as u32,
                            pbank: pb,
                            cycle_slot: slot as u32,
                            orientation: ChunkOrientation::RowChunk,
                        },
                        origin: (r0 + slot, c0),
                        padding_lanes: (c0 + CHUNK_BYTES).saturating_sub(l) as u8,
                    });
                }
            }
        }
    }
    let mut plan = LayoutPlan {
        flow: Flow::KFlow,
        rows: h_dim,
        cols: l,
        geometry: *geom,
        chunks,
        broadcast: plan_q_broadcast(h_dim, geom),
    };
    plan.prune_broadcast();
    Ok(plan)
}

/// Places an `l x h_dim` V-cache matrix for the inner-product flow.
pub fn map_v(l: usize, h_dim: usize, geom: &Geometry) -> Result<LayoutPlan, MappingError> {
    check_dims(l, h_dim, geom)?;
    let pass_cols = geom.v_pass_cols();
    let n_hb = h_dim.div_ceil(pass_cols);
    let passes = l.div_ceil(TILE_ROWS) * n_hb;
    check_capacity(passes, geom)?;

    let mut chunks = Vec::with_capacity(h_dim * l.div_ceil(CHUNK_BYTES));
    for p in 0..passes {
        let (lb, hb) = (p / n_hb, p % n_hb);
        for bank in 0..geom.banks() {
            let c_bank = hb * pass_cols + bank * TILE_COLS;
            if c_bank >= h_dim {
                break;
            }
            for cu_col in 0..TILE_COLS.min(h_dim - c_bank) {
                let top = cu_col < TILE_COLS / 2;
                for half in 0..2 {
                    let r0 = lb * TILE_ROWS + half * CHUNK_BYTES;
                    if r0 >= l {
                        break;
                    }
                    chunks.push(ChunkEntry {
                        addr: ChunkAddr {
                            die: (p % geom.dies as usize) as u32,
                            segment: p as u32,
                            bank: bank as u32,
                            pbank: v_pbank(top, half == 1),
                            cycle_slot: (cu_col % (TILE_COLS / 2)) as u32,
                            orientation: ChunkOrientation::ColChunk,
                        },
                        origin: (r0, c_bank + cu_col),
                        padding_lanes: (r0 + CHUNK_BYTES).saturating_sub(l) as u8,
                    });
                }
            }
        }
    }
    let mut plan = LayoutPlan {
        flow: Flow::VFlow,
        rows: l,
        cols: h_dim,
        geometry: *geom,
        chunks,
        broadcast: plan_attn_broadcast(l, geom),
    };
    plan.prune_broadcast();
    Ok(plan)
}

impl LayoutPlan {
    pub fn flow(&self) -> Flow {
        self.flow
    }

    pub fn matrix_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn chunks(&self) -> &[ChunkEntry] {
        &self.chunks
    }

    pub fn broadcast(&self) -> &BroadcastPlan {
        &self.broadcast
    }

    fn orientation(&self) -> ChunkOrientation {
        match self.flow {
            Flow::KFlow => ChunkOrientation::RowChunk,
            Flow::VFlow => ChunkOrientation::ColChunk,
        }
    }

    /// Segment count along rows and column-block count along columns.
    fn grid(&self) -> (usize, usize) {
        match self.flow {
            Flow::KFlow => (
                self.rows.div_ceil(self.geometry.k_pass_rows()),
                self.cols.div_ceil(TILE_COLS),
            ),
            Flow::VFlow => (
                self.rows.div_ceil(TILE_ROWS),
                self.cols.div_ceil(self.geometry.v_pass_cols()),
            ),
        }
    }

    pub fn passes(&self) -> usize {
        pass_count(self.flow, self.rows, self.cols, &self.geometry)
    }

    /// Input segment a pass consumes.
    fn pass_segment(&self, pass: usize) -> u32 {
        (pass / self.grid().1) as u32
    }

    /// Keeps only destinations that hold chunks of the matching pass.
    fn prune_broadcast(&mut self) {
        let mut occupied: BTreeMap<u32, BTreeSet<(u32, u32)>> = BTreeMap::new();
        for e in &self.chunks {
            occupied
                .entry(self.pass_segment(e.addr.segment as usize))
                .or_default()
                .insert((e.addr.die, e.addr.bank));
        }
        for slice in &mut self.broadcast.slices {
            let banks = occupied.get(&slice.segment);
            slice.destinations.retain(|d| {
                banks.is_some_and(|s| s.contains(&(d.die, d.bank)))
                    && slice.bank.is_none_or(|b| b == d.bank)
            });
        }
    }

    /// Chunk address and lane holding matrix element `(row, col)`.
    pub fn locate(&self, row: usize, col: usize) -> Result<(ChunkAddr, usize), MappingError> {
        if row >= self.rows || col >= self.cols {
            return Err(MappingError::OutOfBounds {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        let dies = self.geometry.dies as usize;
        let (_, n_inner) = self.grid();
        let (pass, bank, pbank, slot, lane) = match self.flow {
            Flow::KFlow => {
                let pass_rows = self.geometry.k_pass_rows();
                let pass = (row / pass_rows) * n_inner + col / TILE_COLS;
                let r_in = row % pass_rows;
                let c_in = col % TILE_COLS;
                let pb = PbankId::from_index(c_in / CHUNK_BYTES).expect("four pbanks per 128 columns");
                (pass, r_in / TILE_ROWS, pb, r_in % TILE_ROWS, c_in % CHUNK_BYTES)
            }
            Flow::VFlow => {
                let pass_cols = self.geometry.v_pass_cols();
                let pass = (row / TILE_ROWS) * n_inner + col / pass_cols;
                let c_in = col % pass_cols;
                let cu_col = c_in % TILE_COLS;
                let r_in = row % TILE_ROWS;
                let pb = v_pbank(cu_col < TILE_COLS / 2, r_in >= CHUNK_BYTES);
                (pass, c_in / TILE_COLS, pb, cu_col % (TILE_COLS / 2), r_in % CHUNK_BYTES)
            }
        };
        Ok((
            ChunkAddr {
                die: (pass % dies) as u32,
                segment: pass as u32,
                bank: bank as u32,
                pbank,
                cycle_slot: slot as u32,
                orientation: self.orientation(),
            },
            lane,
        ))
    }

    /// Matrix coordinates of lane 0 of `addr`, derived from the mapping rule.
    fn origin_of(&self, addr: &ChunkAddr) -> Option<(usize, usize)> {
        let (n_outer, n_inner) = self.grid();
        let pass = addr.segment as usize;
        let slot = addr.cycle_slot as usize;
        let bank = addr.bank as usize;
        if addr.orientation != self.orientation()
            || pass >= n_outer * n_inner
            || addr.die as usize != pass % self.geometry.dies as usize
            || bank >= self.geometry.banks()
        {
            return None;
        }
        let (outer, inner) = (pass / n_inner, pass % n_inner);
        let origin = match self.flow {
            Flow::KFlow => {
                if slot >= TILE_ROWS {
                    return None;
                }
                (
                    outer * self.geometry.k_pass_rows() + bank * TILE_ROWS + slot,
                    inner * TILE_COLS + addr.pbank.index() * CHUNK_BYTES,
                )
            }
            Flow::VFlow => {
                if slot >= TILE_COLS / 2 {
                    return None;
                }
                let bottom = if addr.pbank.is_top() { 0 } else { TILE_COLS / 2 };
                let upper = matches!(addr.pbank, PbankId::TR | PbankId::BR) as usize;
                (
                    outer * TILE_ROWS + upper * CHUNK_BYTES,
                    inner * self.geometry.v_pass_cols() + bank * TILE_COLS + bottom + slot,
                )
            }
        };
        (origin.0 < self.rows && origin.1 < self.cols).then_some(origin)
    }

    /// The 32 matrix coordinates stored at `addr`.
    pub fn elements_at(&self, addr: &ChunkAddr) -> Result<Vec<ElementRef>, MappingError> {
        let origin = self
            .origin_of(addr)
            .ok_or(MappingError::UnknownAddress(*addr))?;
        let probe = ChunkEntry {
            addr: *addr,
            origin,
            padding_lanes: 0,
        };
        Ok((0..CHUNK_BYTES)
            .map(|i| {
                let (row, col) = probe.lane(i);
                ElementRef {
                    row,
                    col,
                    is_padding: row >= self.rows || col >= self.cols,
                }
            })
            .collect())
    }

    /// Checks that every element sits in exactly one chunk lane and that the
    /// stored chunk table agrees with [`Self::locate`] and [`Self::elements_at`].
    pub fn verify_bijection(&self) -> Result<BijectionReport, MappingError> {
        let mut seen = vec![0u8; self.rows * self.cols];
        let mut padding = 0usize;
        for e in &self.chunks {
            let expected = self.elements_at(&e.addr)?;
            for (lane, want) in expected.iter().enumerate() {
                let (row, col) = e.lane(lane);
                if (row, col) != (want.row, want.col) {
                    return Err(MappingError::Bijection(format!(
                        "{} lane {lane} holds ({row}, {col}) but the mapping places ({}, {}) there",
                        e.addr, want.row, want.col
                    )));
                }
                if want.is_padding {
                    padding += 1;
                    continue;
                }
                let idx = row * self.cols + col;
                seen[idx] = seen[idx].saturating_add(1);
                let back = self.locate(row, col)?;
                if back != (e.addr, lane) {
                    return Err(MappingError::Bijection(format!(
                        "({row}, {col}) stored at {} lane {lane} but locates to {} lane {}",
                        e.addr, back.0, back.1
                    )));
                }
            }
            let flagged = expected.iter().filter(|x| x.is_padding).count();
            if flagged != e.padding_lanes as usize {
                return Err(MappingError::Bijection(format!(
                    "{} flags {} padding lanes, expected {flagged}",
                    e.addr, e.padding_lanes
                )));
            }
        }
        if let Some(idx) = seen.iter().position(|&n| n != 1) {
            return Err(MappingError::Bijection(format!(
                "element ({}, {}) appears in {} chunks",
                idx / self.cols,
                idx % self.cols,
                seen[idx]
            )));
        }
        Ok(BijectionReport {
            elements: seen.len(),
            chunks: self.chunks.len(),
            padding_lanes: padding,
        })
    }

    /// Copy of this plan with one chunk's origin shifted by one element.
    /// Used to check that verification catches off-by-one layouts.
    pub fn perturbed(&self) -> LayoutPlan {
        let mut out = self.clone();
        let mid = out.chunks.len() / 2;
        if let Some(e) = out.chunks.get_mut(mid) {
            match e.addr.orientation {
                ChunkOrientation::RowChunk => e.origin.1 += 1,
                ChunkOrientation::ColChunk => e.origin.0 += 1,
            }
        }
        out
    }

    pub fn utilization(&self) -> Utilization {
        let mut cus: BTreeMap<(u32, u32), BTreeSet<CuSide>> = BTreeMap::new();
        let mut padding = 0usize;
        for e in &self.chunks {
            cus.entry((e.addr.segment, e.addr.bank))
                .or_default()
                .insert(e.addr.pbank.cu());
            padding += e.padding_lanes as usize;
        }
        let passes = self.passes();
        let rounds = passes.div_ceil(self.geometry.dies as usize);
        let bank_slots = rounds * self.geometry.dies as usize * self.geometry.banks();
        let lanes = self.chunks.len() * CHUNK_BYTES;
        Utilization {
            passes,
            bank_slots,
            occupied_bank_passes: cus.len(),
            idle_bank_passes: bank_slots - cus.len(),
            active_cus: cus.values().map(BTreeSet::len).sum(),
            cus_in_occupied_banks: 2 * cus.len(),
            valid_lane_fraction: if lanes == 0 {
                0.0
            } else {
                (lanes - padding) as f64 / lanes as f64
            },
        }
    }

    /// Writes one CSV line per chunk lane, padding lanes included.
    pub fn write_layout_csv<W: Write>(&self, out: W) -> Result<(), MappingError> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.chunks {
            for lane in 0..CHUNK_BYTES {
                let (row, col) = e.lane(lane);
                w.serialize(LayoutRow {
                    element_row: row,
                    element_col: col,
                    die: e.addr.die,
                    bank: e.addr.bank,
                    pbank: e.addr.pbank,
                    segment: e.addr.segment,
                    cycle_slot: e.addr.cycle_slot,
                    is_padding: row >= self.rows || col >= self.cols,
                })?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Writes `matrix` (row-major) into a pbank memory image following the
    /// chunk table, then runs every bank pass through the CU model and
    /// reduces the partial sums. `input` has one element per matrix row.
    pub fn execute(
        &self,
        matrix: &[i8],
        input: &[i8],
        mode: ComputeMode,
    ) -> Result<PipelineOutput, MappingError> {
        if matrix.len() != self.rows * self.cols {
            return Err(MappingError::Length {
                what: "matrix",
                got: matrix.len(),
                expected: self.rows * self.cols,
            });
        }
        if input.len() != self.rows {
            return Err(MappingError::Length {
                what: "input vector",
                got: input.len(),
                expected: self.rows,
            });
        }

        let mut image: HashMap<ChunkAddr, [i8; CHUNK_BYTES]> = HashMap::with_capacity(self.chunks.len());
        let mut banks: BTreeMap<(u32, u32), Vec<ChunkAddr>> = BTreeMap::new();
        for e in &self.chunks {
            let mut burst = [0i8; CHUNK_BYTES];
            for (lane, v) in burst.iter_mut().enumerate() {
                let (r, c) = e.lane(lane);
                if r < self.rows && c < self.cols {
                    *v = matrix[r * self.cols + c];
                }
            }
            image.insert(e.addr, burst);
            banks.entry((e.addr.segment, e.addr.bank)).or_default().push(e.addr);
        }

        let (_, n_inner) = self.grid();
        let mut values = vec![0i64; self.cols];
        let mut pass_cycles: BTreeMap<u32, u64> = BTreeMap::new();
        let mut weight_bytes = 0u64;
        for (&(pass, bank), addrs) in &banks {
            let mut tile = Tile::zeros(TILE_ROWS, TILE_COLS);
            for addr in addrs {
                let burst = &image[addr];
                let slot = addr.cycle_slot as usize;
                for (lane, &v) in burst.iter().enumerate() {
                    match self.flow {
                        Flow::KFlow => tile.set(slot, addr.pbank.index() * CHUNK_BYTES + lane, v),
                        Flow::VFlow => {
                            let col = slot + if addr.pbank.is_top() { 0 } else { TILE_COLS / 2 };
                            let row = lane
                                + if matches!(addr.pbank, PbankId::TR | PbankId::BR) {
                                    CHUNK_BYTES
                                } else {
                                    0
                                };
                            tile.set(row, col, v);
                        }
                    }
                }
            }
            let segment = self.pass_segment(pass as usize);
            let slice = self
                .broadcast
                .slice_for(segment, bank)
                .ok_or_else(|| MappingError::Bijection(format!("no input slice for pass {pass} bank {bank}")))?;
            let buf = self.broadcast.gather(slice, input);
            let out = match self.flow {
                Flow::KFlow => datapath::run_k_flow_mode(&buf, &tile, mode)?,
                Flow::VFlow => datapath::run_v_flow_mode(&buf, &tile, mode)?,
            };
            let inner = pass as usize % n_inner;
            let col0 = match self.flow {
                Flow::KFlow => inner * TILE_COLS,
                Flow::VFlow => inner * self.geometry.v_pass_cols() + bank as usize * TILE_COLS,
            };
            for (j, &v) in out.values.iter().enumerate() {
                if let Some(slot) = values.get_mut(col0 + j) {
                    *slot += v as i64;
                }
            }
            let longest = pass_cycles.entry(pass).or_default();
            *longest = (*longest).max(out.internal_cycles);
            weight_bytes += out.weight_bytes;
        }

        let dies = self.geometry.dies as usize;
        let mut per_die = vec![0u64; dies];
        for (pass, cycles) in pass_cycles {
            per_die[pass as usize % dies] += cycles;
        }
        Ok(PipelineOutput {
            values,
            die_cycles: per_die.into_iter().max().unwrap_or(0),
            bank_passes: banks.len(),
            weight_bytes,
        })
    }
}

/// Plain `input^T * matrix` over a row-major `rows x cols` matrix.
pub fn reference_gemv(matrix: &[i8], rows: usize, cols: usize, input: &[i8]) -> Vec<i64> {
    let mut out = vec![0i64; cols];
    for r in 0..rows {
        let x = input[r] as i64;
        for (c, o) in out.iter_mut().enumerate() {
            *o += x * matrix[r * cols + c] as i64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_die() -> Geometry {
        Geometry::single_die(&PimOrg::default())
    }

    fn ramp(n: usize, seed: i32) -> Vec<i8> {
        (0..n).map(|i| ((i as i32 * 37 + seed) % 255 - 127) as i8).collect()
    }

    #[test]
    fn k_die_tile_fills_every_bank() {
        let plan = map_k(1024, 128, &one_die()).unwrap();
        assert_eq!(plan.passes(), 1);
        let u = plan.utilization();
        assert_eq!(u.occupied_bank_passes, 16);
        assert_eq!(u.idle_bank_passes, 0);
        assert_eq!(u.valid_lane_fraction, 1.0);
        assert_eq!(plan.chunks().len(), 1024 * 4);
        assert!(plan.chunks().iter().all(|e| e.padding_lanes == 0));
    }

    #[test]
    fn small_k_uses_bank_zero() {
        let plan = map_k(64, 128, &one_die()).unwrap();
        assert!(plan.chunks().iter().all(|e| e.addr.bank == 0));
        let u = plan.utilization();
        assert_eq!((u.occupied_bank_passes, u.idle_bank_passes), (1, 15));
        assert_eq!(u.active_cus, 2);
    }

    #[test]
    fn single_k_chunk() {
        let plan = map_k(1, 32, &one_die()).unwrap();
        assert_eq!(plan.chunks().len(), 1);
        let a = plan.chunks()[0].addr;
        assert_eq!((a.die, a.bank, a.pbank, a.segment), (0, 0, PbankId::TL, 0));
    }

    #[test]
    fn v_die_tile_fills_every_bank() {
        let plan = map_v(64, 2048, &one_die()).unwrap();
        assert_eq!(plan.passes(), 1);
        let u = plan.utilization();
        assert_eq!(u.occupied_bank_passes, 16);
        assert_eq!(u.active_cus, 32);
        assert_eq!(plan.chunks().len(), 2048 * 2);
    }

    #[test]
    fn small_v_uses_bank_zero() {
        let plan = map_v(64, 128, &one_die()).unwrap();
        assert!(plan.chunks().iter().all(|e| e.addr.bank == 0));
        let plan = map_v(32, 1, &one_die()).unwrap();
        assert_eq!(plan.chunks().len(), 1);
        assert_eq!(plan.chunks()[0].addr.orientation, ChunkOrientation::ColChunk);
        assert_eq!(plan.chunks()[0].addr.pbank, PbankId::TL);
    }

    #[test]
    fn q_broadcast_segments() {
        let g = one_die();
        assert_eq!(plan_q_broadcast(2048, &g).segments(), 2);
        let p = plan_q_broadcast(1024, &g);
        assert_eq!(p.segments(), 1);
        for (b, s) in p.slices.iter().enumerate() {
            assert_eq!((s.start, s.valid), (64 * b, 64));
            assert_eq!(s.destinations.len(), 2);
            assert!(s.destinations.iter().all(|d| d.bank == b as u32));
        }
        let p = plan_q_broadcast(64, &g);
        assert_eq!(p.slices.iter().filter(|s| s.valid > 0).count(), 1);
        assert_eq!(p.slices.len(), 16);
    }

    #[test]
    fn attn_broadcast_subvectors() {
        let g = one_die();
        let p = plan_attn_broadcast(128, &g);
        assert_eq!(p.slices.len(), 2);
        assert!(p.slices.iter().all(|s| s.destinations.len() == 32));
        assert_eq!(plan_attn_broadcast(64, &g).slices.len(), 1);
        let p = plan_attn_broadcast(70, &g);
        assert_eq!(p.slices[1].valid, 6);
        let input: Vec<i8> = (0..70).map(|i| i as i8).collect();
        let buf = p.gather(&p.slices[1], &input);
        assert_eq!(&buf[..6], &[64, 65, 66, 67, 68, 69]);
        assert!(buf[6..].iter().all(|&v| v == 0));
    }

    #[test]
    fn elements_at_inverts_mapping() {
        let plan = map_k(1024, 128, &one_die()).unwrap();
        let first = plan.elements_at(&plan.chunks()[0].addr).unwrap();
        assert!(first.iter().enumerate().all(|(i, e)| (e.row, e.col) == (0, i) && !e.is_padding));

        let mut bogus = plan.chunks()[0].addr;
        bogus.segment = 9;
        assert!(matches!(plan.elements_at(&bogus), Err(MappingError::UnknownAddress(_))));

        let ragged = map_k(3, 40, &one_die()).unwrap();
        let tail = ragged.chunks().iter().find(|e| e.padding_lanes > 0).unwrap();
        let lanes = ragged.elements_at(&tail.addr).unwrap();
        assert_eq!(lanes.iter().filter(|e| e.is_padding).count(), 24);
    }

    #[test]
    fn capacity_is_checked() {
        let g = Geometry {
            dies: 1,
            banks_per_die: 16,
            die_capacity: 1 << 20,
        };
        assert!(map_k(1024, 1024, &g).is_ok());
        assert!(matches!(
            map_k(1024, 1152, &g),
            Err(MappingError::CapacityExceeded { .. })
        ));
        assert!(matches!(map_v(0, 4, &g), Err(MappingError::EmptyMatrix { .. })));
    }

    #[test]
    fn passes_round_robin_over_dies() {
        let g = Geometry {
            dies: 4,
            banks_per_die: 16,
            die_capacity: 4 * GIB,
        };
        let plan = map_k(2048, 384, &g).unwrap();
        assert_eq!(plan.passes(), 6);
        for e in plan.chunks() {
            assert_eq!(e.addr.die, e.addr.segment % 4);
        }
        let u = plan.utilization();
        assert_eq!(u.bank_slots, 2 * 4 * 16);
        plan.verify_bijection().unwrap();
    }

    #[test]
    fn perturbation_is_detected() {
        let plan = map_v(100, 300, &one_die()).unwrap();
        plan.verify_bijection().unwrap();
        assert!(matches!(
            plan.perturbed().verify_bijection(),
            Err(MappingError::Bijection(_))
        ));
    }

    #[test]
    fn layout_csv_has_one_line_per_lane() {
        let plan = map_k(2, 40, &one_die()).unwrap();
        let mut buf = Vec::new();
        plan.write_layout_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "element_row,element_col,die,bank,pbank,segment,cycle_slot,is_padding"
        );
        assert_eq!(lines.clone().count(), 4 * 32);
        assert_eq!(lines.next().unwrap(), "0,0,0,0,TL,0,0,false");
        assert!(text.contains("1,63,0,0,TR,0,1,true"));
    }

    #[test]
    fn pipeline_counts_die_cycles() {
        let g = one_die();
        let m = ramp(1024 * 128, 5);
        let q = ramp(1024, 9);
        let out = map_k(1024, 128, &g).unwrap().execute(&m, &q, ComputeMode::Full).unwrap();
        assert_eq!(out.values, reference_gemv(&m, 1024, 128, &q));
        assert_eq!(out.die_cycles, 64);
        assert_eq!(out.bank_passes, 16);
        let half = map_k(1024, 128, &g).unwrap().execute(&m, &q, ComputeMode::Half).unwrap();
        assert_eq!(half.values, out.values);
        assert_eq!(half.die_cycles, 128);
    }

    #[test]
    fn pipeline_rejects_bad_lengths() {
        let plan = map_v(4, 4, &one_die()).unwrap();
        assert!(plan.execute(&[0; 15], &[0; 4], ComputeMode::Full).is_err());
        assert!(plan.execute(&[0; 16], &[0; 3], ComputeMode::Full).is_err());
    }

    #[test]
    fn appended_column_spreads_over_banks() {
        let h = 512;
        let plan = map_k(h, 200, &one_die()).unwrap();
        let banks: BTreeSet<u32> = (0..h).map(|r| plan.locate(r, 199).unwrap().0.bank).collect();
        assert_eq!(banks.len(), h / 64);
        let u = plan.utilization();
        assert_eq!(u.active_cus, u.cus_in_occupied_banks);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn bijection_small(rows in 1usize..300, cols in 1usize..300, v in any::<bool>(), dies in 1u32..5) {
            let g = Geometry { dies, banks_per_die: 16, die_capacity: 4 * GIB };
            let plan = if v { map_v(rows, cols, &g) } else { map_k(rows, cols, &g) }.unwrap();
            let rep = plan.verify_bijection().unwrap();
            prop_assert_eq!(rep.elements, rows * cols);
            prop_assert_eq!(rep.chunks * 32, rows * cols + rep.padding_lanes);
        }

        #[test]
        fn pipeline_matches_reference(rows in 1usize..200, cols in 1usize..200, v in any::<bool>(), seed in 0i32..1000) {
            let g = Geometry { dies: 2, banks_per_die: 16, die_capacity: 4 * GIB };
            let m = ramp(rows * cols, seed);
            let x = ramp(rows, seed + 11);
            let plan = if v { map_v(rows, cols, &g) } else { map_k(rows, cols, &g) }.unwrap();
            let out = plan.execute(&m, &x, ComputeMode::Full).unwrap();
            prop_assert_eq!(out.values, reference_gemv(&m, rows, cols, &x));
        }
    }
}
