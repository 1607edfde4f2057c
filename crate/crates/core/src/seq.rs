//! Symmetric 2-bit quantization with levels `{-1.5, -0.5, 0.5, 1.5} * s`.
//!
//! There is no zero level. Codes are `00 -> -1.5`, `01 -> -0.5`,
//! `10 -> +0.5`, `11 -> +1.5`, packed four per byte, first code in the low
//! bits. Decision boundaries sit at `0` and `±s`; a value exactly on `±s`
//! goes to the outer level and `0` goes to `+0.5 s`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEVELS: [f32; 4] = [-1.5, -0.5, 0.5, 1.5];
pub const CODES_PER_BYTE: usize = 4;
const OUTER_LEVEL: f32 = 1.5;

/// Scale multipliers tried by [`micro_tune_scale`]: 0.50, 0.55, ..., 1.20.
pub fn micro_tune_grid() -> impl Iterator<Item = f32> {
    (0..15).map(|i| (50 + 5 * i) as f32 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqTensor {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    scale: Vec<f32>,
}

impl SeqTensor {
    pub fn from_parts(rows: usize, cols: usize, codes: Vec<u8>, scale: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape);
        }
        if scale.len() != rows {
            return Err(Error::ShapeMismatch(format!("{} scales for {rows} rows", scale.len())));
        }
        let expected = payload_bytes(rows, cols);
        if codes.len() as u64 != expected {
            return Err(Error::PayloadLengthMismatch { expected, found: codes.len() as u64 });
        }
        Ok(Self { rows, cols, codes, scale })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Packed codes.
    pub fn packed(&self) -> &[u8] {
        &self.codes
    }

    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    pub fn code(&self, index: usize) -> u8 {
        (self.codes[index / CODES_PER_BYTE] >> (2 * (index % CODES_PER_BYTE))) & 0b11
    }

    pub fn payload_bits(&self) -> u64 {
        2 * (self.rows * self.cols) as u64
    }

    pub fn dequantize(&self) -> Tensor {
        let data =
            (0..self.rows * self.cols).map(|i| LEVELS[self.code(i) as usize] * self.scale[i / self.cols]).collect();
        Tensor::matrix(self.rows, self.cols, data).expect("shape checked at construction")
    }
}

pub fn payload_bytes(rows: usize, cols: usize) -> u64 {
    ((rows * cols).div_ceil(CODES_PER_BYTE)) as u64
}

/// Nearest level index for `v` at scale `s`.
#[inline]
pub fn quantize_value(v: f32, s: f32) -> u8 {
    if v >= s {
        3
    } else if v >= 0.0 {
        2
    } else if v > -s {
        1
    } else {
        0
    }
}

/// Pack 2-bit codes four per byte, low bits first; the tail is zero padded.
pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(CODES_PER_BYTE)
        .map(|chunk| chunk.iter().enumerate().fold(0u8, |b, (i, &c)| b | (c & 0b11) << (2 * i)))
        .collect()
}

pub fn unpack_codes(bytes: &[u8], count: usize) -> Vec<u8> {
    (0..count).map(|i| (bytes[i / CODES_PER_BYTE] >> (2 * (i % CODES_PER_BYTE))) & 0b11).collect()
}

/// Initial scale `max|row| / 1.5`; 1 for an all-zero row.
pub fn initial_scale(row: &[f32]) -> f32 {
    let m = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m / OUTER_LEVEL
    } else {
        1.0
    }
}

/// Mean squared error between `row` and its quantization at scale `s`.
pub fn row_mse(row: &[f32], s: f32) -> f64 {
    let sum: f64 = row
        .iter()
        .map(|&v| {
            let d = v as f64 - (LEVELS[quantize_value(v, s) as usize] * s) as f64;
            d * d
        })
        .sum();
    sum / row.len() as f64
}

/// Best of `s0 * k` over [`micro_tune_grid`] by row MSE; ties prefer larger `k`.
pub fn micro_tune_scale(row: &[f32], s0: f32) -> Result<f32> {
    if !(s0 > 0.0) || !s0.is_finite() {
        return Err(Error::InvalidArgument(format!("initial scale {s0} must be positive")));
    }
    if row.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mut best = (f64::INFINITY, s0);
    for k in micro_tune_grid() {
        let s = s0 * k;
        let err = row_mse(row, s);
        if err <= best.0 {
            best = (err, s);
        }
    }
    Ok(best.1)
}

fn quantize_rows(w: &Tensor, scale_for: impl Fn(&[f32]) -> Result<f32>) -> Result<SeqTensor> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("expected a matrix, got {:?}", w.shape())));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scale = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let s = scale_for(row)?;
        codes.extend(row.iter().map(|&v| quantize_value(v, s)));
        scale.push(s);
    }
    SeqTensor::from_parts(rows, cols, pack_codes(&codes), scale)
}

/// Quantize with the initial scale of each row.
pub fn seq_quantize(w: &Tensor) -> Result<SeqTensor> {
    quantize_rows(w, |row| Ok(initial_scale(row)))
}

/// Quantize with each row's scale micro-tuned from its initial scale.
pub fn seq_quantize_tuned(w: &Tensor) -> Result<SeqTensor> {
    quantize_rows(w, |row| micro_tune_scale(row, initial_scale(row)))
}

/// Dequantization-free matvec: per row, sum the activations falling on each
/// level, then `s * (1.5 * (S3 - S0) + 0.5 * (S2 - S1))`.
pub fn seq_matvec(q: &SeqTensor, x: &Tensor) -> Result<Tensor> {
    if x.len() != q.cols {
        return Err(Error::ShapeMismatch(format!("expected {} activations, got {:?}", q.cols, x.shape())));
    }
    let xs = x.data();
    let y = (0..q.rows)
        .map(|r| {
            let mut sums = [0.0f32; 4];
            let base = r * q.cols;
            for (c, &xv) in xs.iter().enumerate() {
                sums[q.code(base + c) as usize] += xv;
            }
            q.scale[r] * (1.5 * (sums[3] - sums[0]) + 0.5 * (sums[2] - sums[1]))
        })
        .collect();
    Tensor::vector(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> Tensor {
        Tensor::matrix(1, 4, vec![0.9, -0.8, 0.05, 0.5]).unwrap()
    }

    #[test]
    fn quantize_example_row() {
        let q = seq_quantize(&example()).unwrap();
        assert!((q.scale()[0] - 0.6).abs() < 1e-7);
        assert_eq!(unpack_codes(q.packed(), 4), vec![3, 0, 2, 2]);
        let d = q.dequantize();
        let expected = [0.9f32, -0.9, 0.3, 0.3];
        for (a, b) in d.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(q.packed().len(), 1);
    }

    #[test]
    fn boundaries() {
        assert_eq!(quantize_value(1.0, 1.0), 3);
        assert_eq!(quantize_value(-1.0, 1.0), 0);
        assert_eq!(quantize_value(0.0, 1.0), 2);
        assert_eq!(quantize_value(-0.0, 1.0), 2);
        assert_eq!(quantize_value(1.5, 1.0), 3);
        assert_eq!(quantize_value(-0.5, 1.0), 1);
    }

    #[test]
    fn negation_mirrors_codes() {
        let w = Tensor::matrix(1, 4, vec![0.9, -0.8, 0.05, 0.5]).unwrap();
        let neg = w.map(|v| -v);
        let a = unpack_codes(seq_quantize(&w).unwrap().packed(), 4);
        let b = unpack_codes(seq_quantize(&neg).unwrap().packed(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*y, 3 - *x);
        }
    }

    #[test]
    fn zero_row_rule() {
        let w = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        let q = seq_quantize(&w).unwrap();
        assert_eq!(q.scale(), &[1.0]);
        assert_eq!(q.dequantize().data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn micro_tune_cases() {
        assert_eq!(micro_tune_grid().count(), 15);
        let on_grid = [1.5f32, -0.5, 0.5, -1.5, 0.5];
        assert_eq!(micro_tune_scale(&on_grid, 1.0).unwrap(), 1.0);

        let row = [0.9f32, -0.8, 0.05, 0.5];
        let s = micro_tune_scale(&row, 0.6).unwrap();
        let exhaustive = micro_tune_grid().map(|k| row_mse(&row, 0.6 * k)).fold(f64::INFINITY, f64::min);
        assert_eq!(row_mse(&row, s), exhaustive);
        assert!(row_mse(&row, s) <= row_mse(&row, 0.6));
        assert!(micro_tune_scale(&row, 0.0).is_err());
    }

    #[test]
    fn matvec_example() {
        let q = seq_quantize(&example()).unwrap();
        let y = seq_matvec(&q, &Tensor::vector(vec![1.0; 4]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-6);
        let z = seq_matvec(&q, &Tensor::vector(vec![0.0; 4]).unwrap()).unwrap();
        assert_eq!(z.data(), &[0.0]);
        assert!(seq_matvec(&q, &Tensor::vector(vec![0.0; 5]).unwrap()).is_err());
    }

    #[test]
    fn byte_round_trip_exhaustive() {
        for byte in 0..=255u8 {
            let codes = unpack_codes(&[byte], 4);
            assert_eq!(pack_codes(&codes), vec![byte]);
        }
    }
}
