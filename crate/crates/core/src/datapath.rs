//! Bit-exact functional model of the per-bank INT8 compute units.
//!
//! A bank carries two CUs (top and bottom). Each CU consumes one 32-byte
//! weight chunk per compute cycle and runs at twice the DRAM internal clock,
//! so one bank retires 128 weight bytes per internal cycle when both CUs are
//! active and 64 when only one is.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{ComputeMode, TILE_COLS, TILE_ROWS};

pub const CHUNK_BYTES: usize = 32;
pub const INPUT_BUFFER_BYTES: usize = 64;
pub const ACCUMULATOR_SLOTS: usize = 128;

/// Compute cycles per internal memory cycle.
const CU_CLOCK_RATIO: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CuError {
    #[error("input of {len} bytes overflows the {INPUT_BUFFER_BYTES} B input buffer")]
    InputOverflow { len: usize },
    #[error("accumulator slot {slot} out of range")]
    SlotOutOfRange { slot: usize },
    #[error("accumulator {slot} overflowed INT32")]
    AccumulatorOverflow { slot: usize },
    #[error("input buffer offset {offset} out of range")]
    InputOutOfRange { offset: usize },
    #[error("shape overflow: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkOrientation {
    /// 1x32 slice of a matrix row.
    RowChunk,
    /// 32x1 slice of a matrix column.
    ColChunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightChunk {
    pub values: [i8; CHUNK_BYTES],
    pub orientation: ChunkOrientation,
}

impl WeightChunk {
    pub fn new(values: [i8; CHUNK_BYTES], orientation: ChunkOrientation) -> Self {
        WeightChunk {
            values,
            orientation,
        }
    }

    /// Copies `src` and zero-fills the remaining lanes.
    pub fn padded(src: &[i8], orientation: ChunkOrientation) -> Self {
        let mut values = [0i8; CHUNK_BYTES];
        let n = src.len().min(CHUNK_BYTES);
        values[..n].copy_from_slice(&src[..n]);
        WeightChunk {
            values,
            orientation,
        }
    }
}

/// Architectural state of one compute unit.
#[derive(Debug, Clone)]
pub struct CuState {
    input: [i8; INPUT_BUFFER_BYTES],
    input_len: usize,
    acc: [i32; ACCUMULATOR_SLOTS],
    live_slots: usize,
    compute_cycles: u64,
}

impl Default for CuState {
    fn default() -> Self {
        CuState {
            input: [0; INPUT_BUFFER_BYTES],
            input_len: 0,
            acc: [0; ACCUMULATOR_SLOTS],
            live_slots: 0,
            compute_cycles: 0,
        }
    }
}

impl CuState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the input buffer contents; unused bytes read as zero.
    pub fn load_input(&mut self, data: &[i8]) -> Result<(), CuError> {
        if data.len() > INPUT_BUFFER_BYTES {
            return Err(CuError::InputOverflow { len: data.len() });
        }
        self.input = [0; INPUT_BUFFER_BYTES];
        self.input[..data.len()].copy_from_slice(data);
        self.input_len = data.len();
        Ok(())
    }

    pub fn input(&self) -> &[i8] {
        &self.input[..self.input_len]
    }

    pub fn input_at(&self, i: usize) -> Result<i8, CuError> {
        self.input
            .get(i)
            .copied()
            .ok_or(CuError::InputOutOfRange { offset: i })
    }

    pub fn accumulators(&self) -> &[i32; ACCUMULATOR_SLOTS] {
        &self.acc
    }

    pub fn preload(&mut self, slot: usize, value: i32) -> Result<(), CuError> {
        *self
            .acc
            .get_mut(slot)
            .ok_or(CuError::SlotOutOfRange { slot })? = value;
        self.live_slots = self.live_slots.max(slot + 1);
        Ok(())
    }

    /// Highest accumulator slot touched so far, plus one.
    pub fn live_slots(&self) -> usize {
        self.live_slots
    }

    pub fn compute_cycles(&self) -> u64 {
        self.compute_cycles
    }

    fn accumulate(&mut self, slot: usize, value: i32) -> Result<(), CuError> {
        let a = &mut self.acc[slot];
        *a = a
            .checked_add(value)
            .ok_or(CuError::AccumulatorOverflow { slot })?;
        Ok(())
    }

    /// `acc[base + j] += scalar * w[j]` for the 32 lanes of a row chunk.
    pub fn outer_step(&mut self, scalar: i8, w: &WeightChunk, base: usize) -> Result<(), CuError> {
        let end = base + CHUNK_BYTES;
        if end > ACCUMULATOR_SLOTS {
            return Err(CuError::SlotOutOfRange { slot: end - 1 });
        }
        for (j, &wj) in w.values.iter().enumerate() {
            self.accumulate(base + j, i32::from(scalar) * i32::from(wj))?;
        }
        self.live_slots = self.live_slots.max(end);
        self.compute_cycles += 1;
        Ok(())
    }

    /// `acc[slot] += dot(input[offset..offset + 32], w)` for a column chunk.
    pub fn inner_step(&mut self, offset: usize, w: &WeightChunk, slot: usize) -> Result<(), CuError> {
        if slot >= ACCUMULATOR_SLOTS {
            return Err(CuError::SlotOutOfRange { slot });
        }
        if offset + CHUNK_BYTES > INPUT_BUFFER_BYTES {
            return Err(CuError::InputOutOfRange { offset });
        }
        let dot: i32 = self.input[offset..offset + CHUNK_BYTES]
            .iter()
            .zip(w.values.iter())
            .map(|(&a, &b)| i32::from(a) * i32::from(b))
            .sum();
        self.accumulate(slot, dot)?;
        self.live_slots = self.live_slots.max(slot + 1);
        self.compute_cycles += 1;
        Ok(())
    }
}

/// Row-major INT8 weight tile held by one bank for a single pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl Tile {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tile {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self, CuError> {
        if data.len() != rows * cols {
            return Err(CuError::Shape(format!(
                "{} values for a {rows}x{cols} tile",
                data.len()
            )));
        }
        Ok(Tile { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        if r < self.rows && c < self.cols {
            self.data[r * self.cols + c]
        } else {
            0
        }
    }

    pub fn set(&mut self, r: usize, c: usize, v: i8) {
        self.data[r * self.cols + c] = v;
    }

    fn row_chunk(&self, r: usize, c0: usize) -> WeightChunk {
        let mut values = [0i8; CHUNK_BYTES];
        for (j, v) in values.iter_mut().enumerate() {
            *v = self.get(r, c0 + j);
        }
        WeightChunk::new(values, ChunkOrientation::RowChunk)
    }

    fn col_chunk(&self, r0: usize, c: usize) -> WeightChunk {
        let mut values = [0i8; CHUNK_BYTES];
        for (i, v) in values.iter_mut().enumerate() {
            *v = self.get(r0 + i, c);
        }
        WeightChunk::new(values, ChunkOrientation::ColChunk)
    }

    fn check_fits(&self, inputs: &[i8]) -> Result<(), CuError> {
        if self.rows > TILE_ROWS || self.cols > TILE_COLS {
            return Err(CuError::Shape(format!(
                "{}x{} tile exceeds {TILE_ROWS}x{TILE_COLS}",
                self.rows, self.cols
            )));
        }
        if inputs.len() != self.rows {
            return Err(CuError::Shape(format!(
                "{} inputs for {} tile rows",
                inputs.len(),
                self.rows
            )));
        }
        Ok(())
    }
}

/// Result and counters of one bank-level tile pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowOutput {
    /// One INT32 partial sum per tile column, zero-padded to 128.
    pub values: Vec<i32>,
    pub internal_cycles: u64,
    pub weight_bytes: u64,
    pub max_bytes_per_cycle: u64,
    pub min_bytes_per_cycle: u64,
    pub peak_input_bytes: usize,
    pub peak_live_accumulators: usize,
}

struct CycleMeter {
    cycles: u64,
    bytes: u64,
    max: u64,
    min: u64,
}

impl CycleMeter {
    fn new() -> Self {
        CycleMeter {
            cycles: 0,
            bytes: 0,
            max: 0,
            min: u64::MAX,
        }
    }

    fn cycle(&mut self, chunks: u64, mode: ComputeMode) {
        let bytes = chunks * CHUNK_BYTES as u64;
        // both CUs run two compute cycles per internal cycle
        let cap = match mode {
            ComputeMode::Full => 2 * CU_CLOCK_RATIO,
            ComputeMode::Half => CU_CLOCK_RATIO,
        } * CHUNK_BYTES as u64;
        assert!(bytes <= cap, "{bytes} B in one internal cycle exceeds {cap} B");
        self.cycles += 1;
        self.bytes += bytes;
        self.max = self.max.max(bytes);
        self.min = self.min.min(bytes);
    }

    fn finish(self, values: Vec<i32>, cus: &[&CuState]) -> FlowOutput {
        FlowOutput {
            values,
            internal_cycles: self.cycles,
            weight_bytes: self.bytes,
            max_bytes_per_cycle: self.max,
            min_bytes_per_cycle: if self.cycles == 0 { 0 } else { self.min },
            peak_input_bytes: cus.iter().map(|c| c.input_len).max().unwrap_or(0),
            peak_live_accumulators: cus.iter().map(|c| c.live_slots()).sum(),
        }
    }
}

/// Outer-product flow: one input element times a 128-wide weight row per internal cycle.
pub fn run_k_flow(inputs: &[i8], tile: &Tile) -> Result<FlowOutput, CuError> {
    run_k_flow_mode(inputs, tile, ComputeMode::Full)
}

/// In full mode the top CU owns columns 0..64 and the bottom CU 64..128.
/// In half mode the top CU alone covers all 128 columns in two cycles per row.
pub fn run_k_flow_mode(inputs: &[i8], tile: &Tile, mode: ComputeMode) -> Result<FlowOutput, CuError> {
    tile.check_fits(inputs)?;
    let mut top = CuState::new();
    let mut bottom = CuState::new();
    let mut meter = CycleMeter::new();
    top.load_input(inputs)?;

    match mode {
        ComputeMode::Full => {
            bottom.load_input(inputs)?;
            for r in 0..tile.rows {
                for (cu, col0) in [(&mut top, 0usize), (&mut bottom, 64)] {
                    let x = cu.input_at(r)?;
                    for half in 0..2 {
                        let c = col0 + half * CHUNK_BYTES;
                        cu.outer_step(x, &tile.row_chunk(r, c), half * CHUNK_BYTES)?;
                    }
                }
                meter.cycle(4, mode);
            }
            let mut values = top.accumulators()[..64].to_vec();
            values.extend_from_slice(&bottom.accumulators()[..64]);
            Ok(meter.finish(values, &[&top, &bottom]))
        }
        ComputeMode::Half => {
            for r in 0..tile.rows {
                let x = top.input_at(r)?;
                for col0 in [0usize, 64] {
                    for half in 0..2 {
                        let c = col0 + half * CHUNK_BYTES;
                        top.outer_step(x, &tile.row_chunk(r, c), c)?;
                    }
                    meter.cycle(2, mode);
                }
            }
            let values = top.accumulators().to_vec();
            Ok(meter.finish(values, &[&top]))
        }
    }
}

/// Inner-product flow: each active CU reduces one 64-row column per internal cycle.
pub fn run_v_flow(inputs: &[i8], tile: &Tile) -> Result<FlowOutput, CuError> {
    run_v_flow_mode(inputs, tile, ComputeMode::Full)
}

pub fn run_v_flow_mode(inputs: &[i8], tile: &Tile, mode: ComputeMode) -> Result<FlowOutput, CuError> {
    tile.check_fits(inputs)?;
    let mut top = CuState::new();
    let mut bottom = CuState::new();
    let mut meter = CycleMeter::new();
    top.load_input(inputs)?;

    let column_pass = |cu: &mut CuState, col: usize, slot: usize| -> Result<(), CuError> {
        cu.inner_step(0, &tile.col_chunk(0, col), slot)?;
        cu.inner_step(CHUNK_BYTES, &tile.col_chunk(CHUNK_BYTES, col), slot)
    };

    match mode {
        ComputeMode::Full => {
            bottom.load_input(inputs)?;
            for c in 0..tile.cols.min(64) {
                column_pass(&mut top, c, c)?;
                let mut chunks = 2;
                if 64 + c < tile.cols {
                    column_pass(&mut bottom, 64 + c, c)?;
                    chunks += 2;
                }
                meter.cycle(chunks, mode);
            }
            let mut values = top.accumulators()[..64].to_vec();
            values.extend_from_slice(&bottom.accumulators()[..64]);
            Ok(meter.finish(values, &[&top, &bottom]))
        }
        ComputeMode::Half => {
            for c in 0..tile.cols {
                column_pass(&mut top, c, c)?;
                meter.cycle(2, mode);
            }
            let values = top.accumulators().to_vec();
            Ok(meter.finish(values, &[&top]))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Drained {
    pub wide: Vec<i32>,
    pub narrow: Option<Vec<i8>>,
}

/// Reads the accumulators out; with `requant_scale` also returns
/// round-to-nearest, saturating INT8 values of `acc * scale`.
pub fn drain_output(acc: &[i32], requant_scale: Option<f64>) -> Drained {
    let narrow = requant_scale.map(|s| acc.iter().map(|&a| requantize(a, s)).collect());
    Drained {
        wide: acc.to_vec(),
        narrow,
    }
}

pub fn requantize(acc: i32, scale: f64) -> i8 {
    let q = (f64::from(acc) * scale).round();
    q.clamp(f64::from(i8::MIN), f64::from(i8::MAX)) as i8
}
