//! Dense single-precision tensors, seeded synthetic generators and the
//! reductions shared by every quantizer.
//!
//! Tensors are row-major. Anything with two or more dimensions can be viewed
//! as a matrix whose columns are the last dimension and whose rows are the
//! product of the leading ones.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::Open01;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} holds {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        let len = shape.iter().product();
        Ok(Self { shape, data: vec![0.0; len] })
    }

    /// One-dimensional tensor wrapping `data`.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of columns when viewed as a matrix (the last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of rows when viewed as a matrix (product of leading dimensions).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::EmptyShape);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Sampling distribution for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Gaussian {
        mean: f64,
        stdev: f64,
    },
    Laplace {
        location: f64,
        scale_b: f64,
    },
    /// Laplace body with a fixed count of entries scaled up by `outlier_multiplier`.
    LaplaceOutlier {
        location: f64,
        scale_b: f64,
        outlier_fraction: f64,
        outlier_multiplier: f64,
    },
}

/// Seed plus distribution. Equal specs give bit-identical samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
    pub distribution: Distribution,
}

impl RngSpec {
    pub fn gaussian(seed: u64, mean: f64, stdev: f64) -> Self {
        Self { seed, distribution: Distribution::Gaussian { mean, stdev } }
    }

    pub fn laplace(seed: u64, location: f64, scale_b: f64) -> Self {
        Self { seed, distribution: Distribution::Laplace { location, scale_b } }
    }

    pub fn laplace_outlier(seed: u64, location: f64, scale_b: f64, fraction: f64, multiplier: f64) -> Self {
        Self {
            seed,
            distribution: Distribution::LaplaceOutlier {
                location,
                scale_b,
                outlier_fraction: fraction,
                outlier_multiplier: multiplier,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.distribution {
            Distribution::Gaussian { stdev, .. } if !(stdev >= 0.0) => {
                Err(Error::InvalidArgument(format!("gaussian stdev {stdev} must be >= 0")))
            }
            Distribution::Laplace { scale_b, .. } if !(scale_b > 0.0) => {
                Err(Error::InvalidArgument(format!("laplace scale {scale_b} must be > 0")))
            }
            Distribution::LaplaceOutlier { scale_b, outlier_fraction, outlier_multiplier, .. } => {
                if !(scale_b > 0.0) {
                    return Err(Error::InvalidArgument(format!("laplace scale {scale_b} must be > 0")));
                }
                if !(0.0..=0.01).contains(&outlier_fraction) {
                    return Err(Error::InvalidArgument(format!(
                        "outlier fraction {outlier_fraction} outside [0, 0.01]"
                    )));
                }
                if !(outlier_multiplier >= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "outlier multiplier {outlier_multiplier} must be >= 1"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Same distribution, different seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Inverse-CDF Laplace draw from a uniform in the open interval (0, 1).
fn laplace_from_uniform(u: f64, location: f64, scale_b: f64) -> f64 {
    let p = u - 0.5;
    location - scale_b * p.signum() * (1.0 - 2.0 * p.abs()).ln()
}

/// Draw a tensor of the requested shape from `spec`.
///
/// For `LaplaceOutlier`, exactly `round(outlier_fraction * N)` entries are
/// amplified; their positions come from the same generator stream after the
/// body has been drawn.
pub fn generate(spec: &RngSpec, shape: &[usize]) -> Result<Tensor> {
    check_shape(shape)?;
    spec.validate()?;
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let data = match spec.distribution {
        Distribution::Gaussian { mean, stdev } => {
            let normal = Normal::new(mean, stdev).map_err(|e| Error::InvalidArgument(format!("gaussian: {e}")))?;
            (0..len).map(|_| normal.sample(&mut rng) as f32).collect()
        }
        Distribution::Laplace { location, scale_b } => {
            (0..len).map(|_| laplace_from_uniform(rng.sample(Open01), location, scale_b) as f32).collect()
        }
        Distribution::LaplaceOutlier { location, scale_b, outlier_fraction, outlier_multiplier } => {
            let mut data: Vec<f32> =
                (0..len).map(|_| laplace_from_uniform(rng.sample(Open01), location, scale_b) as f32).collect();
            let count = outlier_count(outlier_fraction, len);
            for i in index::sample(&mut rng, len, count) {
                data[i] = (data[i] as f64 * outlier_multiplier) as f32;
            }
            data
        }
    };
    Tensor::new(shape.to_vec(), data)
}

/// Number of amplified entries for a `LaplaceOutlier` tensor of `len` values.
pub fn outlier_count(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64).round() as usize).min(len)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Dense matrix-vector product, accumulating each row left to right.
pub fn matvec_dense(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let n = w.cols();
    if w.shape().len() != 2 || x.len() != n {
        return Err(Error::ShapeMismatch(format!("matvec of {:?} with vector of length {}", w.shape(), x.len())));
    }
    let xs = x.data();
    let y = (0..w.rows())
        .map(|r| {
            let mut acc = 0.0f32;
            for (wv, xv) in w.row(r).iter().zip(xs) {
                acc += wv * xv;
            }
            acc
        })
        .collect();
    Tensor::vector(y)
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("mse of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(mse_slices(a.data(), b.data()))
}

pub(crate) fn mse_slices(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Cosine similarity of two equally sized vectors, clamped to [-1, 1].
/// Two zero vectors are identical (1); one zero vector gives 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Nearest-rank quantile of `|t|`: the k-th smallest absolute value with
/// `k = ceil(q * N)` clamped to `[1, N]`.
pub fn quantile_abs(t: &Tensor, q: f64) -> Result<f32> {
    if t.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }
    let n = t.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(kth_smallest_abs(t.data(), k))
}

/// k-th smallest absolute value, 1-based.
pub(crate) fn kth_smallest_abs(values: &[f32], k: usize) -> f32 {
    debug_assert!(k >= 1 && k <= values.len());
    if k == values.len() {
        return values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    }
    let mut abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let (_, kth, _) = abs.select_nth_unstable_by(k - 1, f32::total_cmp);
    *kth
}

// ---------------------------------------------------------------------------
// Raw tensor files
// ---------------------------------------------------------------------------

pub const RTF_MAGIC: [u8; 4] = *b"ARTF";
pub const RTF_VERSION: u8 = 0x01;

/// Serialize to the raw tensor layout: magic, version, ndim, u64 dims, f32 payload.
pub fn write_rtf_to(t: &Tensor, mut w: impl Write) -> Result<()> {
    let ndim = u8::try_from(t.shape().len())
        .map_err(|_| Error::InvalidArgument(format!("{} dimensions exceed 255", t.shape().len())))?;
    let mut buf = Vec::with_capacity(6 + 8 * t.shape().len() + 4 * t.len());
    buf.extend_from_slice(&RTF_MAGIC);
    buf.push(RTF_VERSION);
    buf.push(ndim);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_rtf_from(mut r: impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_rtf(&bytes)
}

pub fn parse_rtf(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        return Err(Error::Truncated("raw tensor header"));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != RTF_MAGIC {
        return Err(Error::BadMagic { expected: RTF_MAGIC, found });
    }
    if bytes[4] != RTF_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let ndim = bytes[5] as usize;
    let dims_end = 6 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Truncated("raw tensor dims"));
    }
    let shape: Vec<usize> =
        bytes[6..dims_end].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    check_shape(&shape)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidArgument("raw tensor dims overflow".into()))?;
    let payload = &bytes[dims_end..];
    let expected = count as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(Error::PayloadLengthMismatch { expected, found: payload.len() as u64 });
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

pub fn write_rtf(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::new();
    write_rtf_to(t, &mut bytes)?;
    crate::io::write_atomic(path.as_ref(), &bytes)
}

pub fn read_rtf(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_rtf(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_is_deterministic() {
        let spec = RngSpec::gaussian(7, 0.0, 1.0);
        let a = generate(&spec, &[4]).unwrap();
        let b = generate(&spec, &[4]).unwrap();
        assert_eq!(a.data(), b.data());
        let c = generate(&spec.with_seed(8), &[4]).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn generate_rejects_empty_shape() {
        let spec = RngSpec::gaussian(1, 0.0, 1.0);
        assert!(matches!(generate(&spec, &[]), Err(Error::EmptyShape)));
        assert!(matches!(generate(&spec, &[3, 0]), Err(Error::EmptyShape)));
    }

    #[test]
    fn laplace_mean_abs_matches_scale() {
        // E|x| = b for a zero-centred Laplace.
        let t = generate(&RngSpec::laplace(11, 0.0, 1.0), &[100_000]).unwrap();
        let mean_abs: f64 = t.data().iter().map(|v| v.abs() as f64).sum::<f64>() / t.len() as f64;
        assert!((mean_abs - 1.0).abs() <= 0.03, "mean |x| = {mean_abs}");
    }

    #[test]
    fn laplace_outlier_amplifies_exact_count() {
        let base = generate(&RngSpec::laplace(5, 0.0, 1.0), &[10_000]).unwrap();
        let spec = RngSpec::laplace_outlier(5, 0.0, 1.0, 0.001, 20.0);
        let t = generate(&spec, &[10_000]).unwrap();
        // Body is drawn first from the same stream, so unchanged entries match bitwise.
        let changed = base.data().iter().zip(t.data()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 10);
        for (a, b) in base.data().iter().zip(t.data()) {
            if a != b {
                assert_eq!(*b, (*a as f64 * 20.0) as f32);
            }
        }
    }

    #[test]
    fn outlier_fraction_is_bounded() {
        let spec = RngSpec::laplace_outlier(1, 0.0, 1.0, 0.02, 20.0);
        assert!(generate(&spec, &[10]).is_err());
        let spec = RngSpec::laplace_outlier(1, 0.0, 1.0, 0.001, 0.5);
        assert!(generate(&spec, &[10]).is_err());
    }

    #[test]
    fn matvec_small_cases() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = matvec_dense(&eye, &Tensor::vector(vec![3.0, 5.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);

        let w = Tensor::matrix(1, 4, vec![1.0, -1.0, 0.0, 1.0]).unwrap();
        let y = matvec_dense(&w, &Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.0]);

        assert!(matvec_dense(&w, &Tensor::vector(vec![1.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn mse_small_cases() {
        let a = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let b = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        let c = Tensor::vector(vec![1.0; 3]).unwrap();
        assert!(matches!(mse(&a, &c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn quantile_nearest_rank() {
        let t = Tensor::vector((1..=1000).map(|v| if v % 2 == 0 { v as f32 } else { -(v as f32) }).collect()).unwrap();
        assert_eq!(quantile_abs(&t, 0.999).unwrap(), 999.0);
        assert_eq!(quantile_abs(&t, 1.0).unwrap(), 1000.0);
        assert_eq!(quantile_abs(&t, 0.0).unwrap(), 1.0);
        let flat = Tensor::vector(vec![-2.5; 7]).unwrap();
        for q in [0.0, 0.3, 0.999, 1.0] {
            assert_eq!(quantile_abs(&flat, q).unwrap(), 2.5);
        }
    }

    #[test]
    fn rtf_rejects_bad_input() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut bytes = Vec::new();
        write_rtf_to(&t, &mut bytes).unwrap();
        assert_eq!(parse_rtf(&bytes).unwrap(), t);
        assert_eq!(bytes.len(), 4 + 1 + 1 + 16 + 24);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_rtf(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            parse_rtf(&bytes[..bytes.len() - 1]),
            Err(Error::PayloadLengthMismatch { expected: 24, found: 23 })
        ));
        assert!(matches!(parse_rtf(&bytes[..10]), Err(Error::Truncated(_))));
    }
}
