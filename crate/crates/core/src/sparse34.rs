//! 3:4 structured-sparse ternary weights.
//!
//! Every contiguous block of four weights holds exactly one zero and three
//! `±1` values. There are `C(4,3) * 2^3 = 32` such blocks, so each block is a
//! 5-bit code and the payload is 1.25 bits per weight.
//!
//! Code layout: `zero_position * 8 + sign_bits`, where `sign_bits` holds the
//! three nonzeros in ascending index order, first nonzero in the most
//! significant bit, `+1 -> 1` and `-1 -> 0`.
//!
//! Also here: the 3-weights-in-5-bits base-3 packing used as a 1.67-bit
//! comparison point, and an annealed dense residual used while training.

use serde::{Deserialize, Serialize};

use crate::bits::{self, BitWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ternary::{LatentWeights, TernaryTensor};

pub const BLOCK: usize = 4;
pub const CODE_BITS: u32 = 5;
pub const NUM_CODES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sparse34BlockCode(u8);

impl Sparse34BlockCode {
    pub fn new(code: u8) -> Result<Self> {
        if code as usize >= NUM_CODES {
            return Err(Error::InvalidBlock(format!("code {code} is not below {NUM_CODES}")));
        }
        Ok(Self(code))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn zero_position(self) -> usize {
        (self.0 >> 3) as usize
    }
}

const fn build_block_table() -> [[i8; 4]; NUM_CODES] {
    let mut table = [[0i8; 4]; NUM_CODES];
    let mut code = 0;
    while code < NUM_CODES {
        let zero = code >> 3;
        let mut bit = 2i32;
        let mut j = 0;
        while j < BLOCK {
            if j != zero {
                table[code][j] = if (code >> bit) & 1 == 1 { 1 } else { -1 };
                bit -= 1;
            }
            j += 1;
        }
        code += 1;
    }
    table
}

/// Decoded block for every code.
pub static BLOCK_TABLE: [[i8; 4]; NUM_CODES] = build_block_table();

/// Zero the smallest-magnitude entry (lowest index on ties); the rest become
/// their sign, with `sign(0) = +1`.
pub fn project_3of4(block: [f32; 4]) -> [i8; 4] {
    let mut zero = 0;
    for j in 1..BLOCK {
        if block[j].abs() < block[zero].abs() {
            zero = j;
        }
    }
    let mut out = [0i8; 4];
    for j in 0..BLOCK {
        if j != zero {
            out[j] = if block[j] < 0.0 { -1 } else { 1 };
        }
    }
    out
}

pub fn encode_block(block: [i8; 4]) -> Result<Sparse34BlockCode> {
    let zeros = block.iter().filter(|&&t| t == 0).count();
    if zeros != 1 || block.iter().any(|t| !(-1..=1).contains(t)) {
        return Err(Error::InvalidBlock(format!("{block:?} is not a 3:4 ternary block")));
    }
    let zero = block.iter().position(|&t| t == 0).unwrap();
    let sign_bits = block.iter().filter(|&&t| t != 0).fold(0u8, |acc, &t| (acc << 1) | u8::from(t == 1));
    Ok(Sparse34BlockCode((zero as u8) << 3 | sign_bits))
}

pub fn decode_block(code: u8) -> Result<[i8; 4]> {
    Sparse34BlockCode::new(code).map(|c| BLOCK_TABLE[c.0 as usize])
}

// ---------------------------------------------------------------------------
// Packed tensor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Sparse34Tensor {
    rows: usize,
    cols: usize,
    codestream: Vec<u8>,
    scale_alpha: Vec<f32>,
}

impl Sparse34Tensor {
    pub fn from_parts(rows: usize, cols: usize, codestream: Vec<u8>, scale_alpha: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape);
        }
        if !cols.is_multiple_of(BLOCK) {
            return Err(Error::PadRequired { cols, multiple: BLOCK });
        }
        if scale_alpha.len() != rows {
            return Err(Error::ShapeMismatch(format!("{} scales for {rows} rows", scale_alpha.len())));
        }
        let expected = bits::bytes_for_bits(payload_bits(rows, cols));
        if codestream.len() as u64 != expected {
            return Err(Error::PayloadLengthMismatch { expected, found: codestream.len() as u64 });
        }
        Ok(Self { rows, cols, codestream, scale_alpha })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / BLOCK
    }

    pub fn codestream(&self) -> &[u8] {
        &self.codestream
    }

    pub fn scale_alpha(&self) -> &[f32] {
        &self.scale_alpha
    }

    pub fn payload_bits(&self) -> u64 {
        payload_bits(self.rows, self.cols)
    }

    pub fn code(&self, row: usize, block: usize) -> u8 {
        let index = (row * self.blocks_per_row() + block) as u64;
        bits::read_bits(&self.codestream, index * CODE_BITS as u64, CODE_BITS) as u8
    }

    pub fn row_codes(&self, row: usize) -> impl Iterator<Item = u8> + '_ {
        (0..self.blocks_per_row()).map(move |b| self.code(row, b))
    }

    /// Ternary values `{-1, 0, +1}`, row-major.
    pub fn signs(&self) -> Vec<i8> {
        (0..self.rows).flat_map(|r| self.row_codes(r)).flat_map(|c| BLOCK_TABLE[c as usize]).collect()
    }

    /// `alpha_r * t` for every weight.
    pub fn dequantize(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let a = self.scale_alpha[r];
            for c in self.row_codes(r) {
                data.extend(BLOCK_TABLE[c as usize].iter().map(|&t| a * t as f32));
            }
        }
        Tensor::matrix(self.rows, self.cols, data).expect("shape checked at construction")
    }
}

/// `rows * cols / 4` codes of 5 bits.
pub fn payload_bits(rows: usize, cols: usize) -> u64 {
    (rows * (cols / BLOCK)) as u64 * CODE_BITS as u64
}

/// Project every 4-block to 3:4 ternary and pack the codes.
///
/// The row scale is `mean|w|` over the retained positions; an all-zero row
/// gets scale 0.
pub fn sparse34_quantize(w: &Tensor) -> Result<Sparse34Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("expected a matrix, got {:?}", w.shape())));
    }
    let (rows, cols) = (w.rows(), w.cols());
    if cols % BLOCK != 0 {
        return Err(Error::PadRequired { cols, multiple: BLOCK });
    }
    let mut writer = BitWriter::with_capacity_bits(payload_bits(rows, cols));
    let mut alpha = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut sum = 0.0f64;
        for chunk in w.row(r).chunks_exact(BLOCK) {
            let block: [f32; 4] = chunk.try_into().unwrap();
            let t = project_3of4(block);
            sum += block.iter().zip(&t).filter(|(_, &t)| t != 0).map(|(v, _)| v.abs() as f64).sum::<f64>();
            writer.push(encode_block(t)?.0 as u32, CODE_BITS);
        }
        alpha.push((sum / (3 * cols / BLOCK) as f64) as f32);
    }
    Sparse34Tensor::from_parts(rows, cols, writer.finish(), alpha)
}

fn check_vector(q_cols: usize, x: &Tensor) -> Result<()> {
    if x.len() != q_cols {
        return Err(Error::ShapeMismatch(format!("expected {q_cols} activations, got {:?}", x.shape())));
    }
    Ok(())
}

/// Sequential reader over a row's 5-bit codes.
struct CodeCursor<'a> {
    bytes: &'a [u8],
    bit: u64,
}

impl<'a> CodeCursor<'a> {
    fn at(q: &'a Sparse34Tensor, row: usize) -> Self {
        Self { bytes: &q.codestream, bit: (row * q.blocks_per_row()) as u64 * CODE_BITS as u64 }
    }

    #[inline]
    fn next_code(&mut self) -> usize {
        let c = bits::read_bits(self.bytes, self.bit, CODE_BITS) as usize;
        self.bit += CODE_BITS as u64;
        c
    }
}

/// Reference kernel: decode each block and accumulate `(alpha * t_j) * x_j`
/// left to right. Bitwise equal to a dense matvec on [`Sparse34Tensor::dequantize`].
pub fn naive_matvec(q: &Sparse34Tensor, x: &Tensor) -> Result<Tensor> {
    check_vector(q.cols, x)?;
    let xs = x.data();
    let y = (0..q.rows)
        .map(|r| {
            let a = q.scale_alpha[r];
            let mut cursor = CodeCursor::at(q, r);
            let mut acc = 0.0f32;
            for group in xs.chunks_exact(BLOCK) {
                let t = &BLOCK_TABLE[cursor.next_code()];
                for j in 0..BLOCK {
                    acc += (a * t[j] as f32) * group[j];
                }
            }
            acc
        })
        .collect();
    Tensor::vector(y)
}

/// Partial sums `sum_j t_j * x_j` of one activation group, for all 32 codes.
pub fn build_group_table(group: &[f32]) -> [f32; NUM_CODES] {
    debug_assert_eq!(group.len(), BLOCK);
    let mut table = [0.0f32; NUM_CODES];
    for zero in 0..BLOCK {
        let mut kept = [0.0f32; 3];
        let mut k = 0;
        for (j, &v) in group.iter().enumerate() {
            if j != zero {
                kept[k] = v;
                k += 1;
            }
        }
        let [a, b, c] = kept;
        let (a2, b2, c2) = (a + a, b + b, c + c);
        let e = &mut table[zero * 8..zero * 8 + 8];
        e[0] = -a - b - c;
        e[1] = e[0] + c2;
        e[2] = e[0] + b2;
        e[3] = e[2] + c2;
        e[4] = e[0] + a2;
        e[5] = e[4] + c2;
        e[6] = e[4] + b2;
        e[7] = e[6] + c2;
    }
    table
}

/// Lookup-table kernel: one table per activation group, built once per input
/// vector and shared by every row; each block then costs a single lookup.
pub fn lut_matvec(q: &Sparse34Tensor, x: &Tensor) -> Result<Tensor> {
    check_vector(q.cols, x)?;
    let tables: Vec<[f32; NUM_CODES]> = x.data().chunks_exact(BLOCK).map(build_group_table).collect();
    let y = (0..q.rows)
        .map(|r| {
            let mut cursor = CodeCursor::at(q, r);
            let mut acc = 0.0f32;
            for table in &tables {
                acc += table[cursor.next_code()];
            }
            q.scale_alpha[r] * acc
        })
        .collect();
    Tensor::vector(y)
}

// ---------------------------------------------------------------------------
// 3 ternary weights in 5 bits
// ---------------------------------------------------------------------------

pub const BASE3_GROUP: usize = 3;
pub const BASE3_CODES: u8 = 27;

/// Base-3 code `sum (t_i + 1) * 3^i`.
pub fn encode_base3_block(values: [i8; 3]) -> Result<u8> {
    if values.iter().any(|t| !(-1..=1).contains(t)) {
        return Err(Error::InvalidBlock(format!("{values:?} is not ternary")));
    }
    Ok(values.iter().rev().fold(0u8, |acc, &t| acc * 3 + (t + 1) as u8))
}

pub fn decode_base3_block(code: u8) -> Result<[i8; 3]> {
    if code >= BASE3_CODES {
        return Err(Error::InvalidBlock(format!("code {code} is not below {BASE3_CODES}")));
    }
    let mut out = [0i8; 3];
    let mut c = code;
    for t in &mut out {
        *t = (c % 3) as i8 - 1;
        c /= 3;
    }
    Ok(out)
}

/// `ceil(rows * cols / 3)` codes of 5 bits; the last group is zero padded.
pub fn base3_payload_bits(rows: usize, cols: usize) -> u64 {
    ((rows * cols).div_ceil(BASE3_GROUP)) as u64 * CODE_BITS as u64
}

/// Ternary tensor packed three weights per 5-bit code over the flattened
/// row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Base3Tensor {
    rows: usize,
    cols: usize,
    codestream: Vec<u8>,
    scale_alpha: Vec<f32>,
    threshold_delta: Vec<f32>,
    lambda: f32,
}

impl Base3Tensor {
    pub fn pack(q: &TernaryTensor) -> Result<Self> {
        let mut writer = BitWriter::with_capacity_bits(base3_payload_bits(q.rows(), q.cols()));
        for chunk in q.signs().chunks(BASE3_GROUP) {
            let mut group = [0i8; 3];
            group[..chunk.len()].copy_from_slice(chunk);
            writer.push(encode_base3_block(group)? as u32, CODE_BITS);
        }
        Self::from_parts(
            q.rows(),
            q.cols(),
            writer.finish(),
            q.scale_alpha().to_vec(),
            q.threshold_delta().to_vec(),
            q.lambda(),
        )
    }

    pub fn from_parts(
        rows: usize,
        cols: usize,
        codestream: Vec<u8>,
        scale_alpha: Vec<f32>,
        threshold_delta: Vec<f32>,
        lambda: f32,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape);
        }
        if scale_alpha.len() != rows || threshold_delta.len() != rows {
            return Err(Error::ShapeMismatch(format!("{} scales for {rows} rows", scale_alpha.len())));
        }
        let expected = bits::bytes_for_bits(base3_payload_bits(rows, cols));
        if codestream.len() as u64 != expected {
            return Err(Error::PayloadLengthMismatch { expected, found: codestream.len() as u64 });
        }
        Ok(Self { rows, cols, codestream, scale_alpha, threshold_delta, lambda })
    }

    pub fn unpack(&self) -> Result<TernaryTensor> {
        let n = self.rows * self.cols;
        let mut signs = Vec::with_capacity(n + BASE3_GROUP);
        for g in 0..n.div_ceil(BASE3_GROUP) {
            let code = bits::read_bits(&self.codestream, (g as u64) * CODE_BITS as u64, CODE_BITS) as u8;
            signs.extend_from_slice(&decode_base3_block(code)?);
        }
        signs.truncate(n);
        TernaryTensor::from_parts(
            self.rows,
            self.cols,
            signs,
            self.scale_alpha.clone(),
            self.threshold_delta.clone(),
            self.lambda,
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codestream(&self) -> &[u8] {
        &self.codestream
    }

    pub fn scale_alpha(&self) -> &[f32] {
        &self.scale_alpha
    }

    pub fn threshold_delta(&self) -> &[f32] {
        &self.threshold_delta
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    pub fn payload_bits(&self) -> u64 {
        base3_payload_bits(self.rows, self.cols)
    }
}

// ---------------------------------------------------------------------------
// Annealed dense residual
// ---------------------------------------------------------------------------

/// Linear schedule from `lambda0` at step 0 to exactly 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub lambda0: f32,
    pub total_steps: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { lambda0: 0.5, total_steps: 1000 }
    }
}

impl AnnealSchedule {
    pub fn new(lambda0: f32, total_steps: u64) -> Result<Self> {
        if !(lambda0 > 0.0) || total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs lambda0 > 0 and at least one step".into()));
        }
        Ok(Self { lambda0, total_steps })
    }
}

/// `lambda0 * (1 - t / T)`.
pub fn anneal_lambda(t: u64, sched: &AnnealSchedule) -> Result<f32> {
    if t > sched.total_steps {
        return Err(Error::InvalidArgument(format!("step {t} is past the schedule end {}", sched.total_steps)));
    }
    if t == sched.total_steps {
        return Ok(0.0);
    }
    Ok((sched.lambda0 as f64 * (1.0 - t as f64 / sched.total_steps as f64)) as f32)
}

fn check_latent(q: &Sparse34Tensor, w: &LatentWeights) -> Result<()> {
    if w.rows() != q.rows || w.cols() != q.cols {
        return Err(Error::ShapeMismatch(format!(
            "latent weights {:?} do not match {}x{} 3:4-sparse tensor",
            w.tensor().shape(),
            q.rows,
            q.cols
        )));
    }
    Ok(())
}

/// `Y = X Q(W)^T + lambda_t * X W^T` for one input vector.
///
/// At the end of the schedule the residual term is skipped, so the result is
/// exactly [`naive_matvec`].
pub fn annealed_forward(
    x: &Tensor,
    q: &Sparse34Tensor,
    w: &LatentWeights,
    t: u64,
    sched: &AnnealSchedule,
) -> Result<Tensor> {
    check_latent(q, w)?;
    let lambda = anneal_lambda(t, sched)?;
    let mut y = naive_matvec(q, x)?;
    if lambda != 0.0 {
        let dense = crate::tensor::matvec_dense(w.tensor(), x)?;
        for (yv, dv) in y.data_mut().iter_mut().zip(dense.data()) {
            *yv += lambda * dv;
        }
    }
    Ok(y)
}

/// Gradient of the loss with respect to the latent weights for one input:
/// straight-through on `Q(W)` plus the exact residual path, i.e.
/// `(1 + lambda_t) * dY_r * x_c`.
pub fn annealed_grad(
    x: &Tensor,
    q: &Sparse34Tensor,
    w: &LatentWeights,
    t: u64,
    sched: &AnnealSchedule,
    d_y: &Tensor,
) -> Result<Tensor> {
    check_latent(q, w)?;
    check_vector(q.cols, x)?;
    if d_y.len() != q.rows {
        return Err(Error::ShapeMismatch(format!("output gradient of length {} for {} rows", d_y.len(), q.rows)));
    }
    let factor = 1.0 + anneal_lambda(t, sched)?;
    let mut grad = Vec::with_capacity(q.rows * q.cols);
    for &g in d_y.data() {
        let g = factor * g;
        grad.extend(x.data().iter().map(|&xv| g * xv));
    }
    Tensor::matrix(q.rows, q.cols, grad)
}
