//! Outlier-isolating FP8 scale search.
//!
//! Plain FP8 calibration maps `max|a|` onto the E4M3 maximum. Here the scale
//! denominator `D` is instead the nearest-rank `(1 - alpha)` quantile of `|a|`,
//! so the largest `floor(alpha * N)` magnitudes saturate to `±D`. The fraction
//! `alpha` is picked from a small grid by minimizing the block output MSE
//! against the full-precision forward over a calibration set.
//!
//! The block is a two-matmul feed-forward unit `y = W2 · silu(W1 · x)`.
//! Activations entering each matmul are quantized with the searched
//! denominator; weights always use per-tensor abs-max FP8.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8::{self, E4M3_MAX};
use crate::tensor::{self, Tensor};

pub const MAX_ALPHA: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearchConfig {
    pub alpha_grid: Vec<f64>,
    pub n_samples: usize,
    pub fp8_max: f32,
}

impl Default for ScaleSearchConfig {
    fn default() -> Self {
        Self::with_grid_points(11)
    }
}

impl ScaleSearchConfig {
    /// `points` evenly spaced fractions covering `[0, 0.001]`.
    pub fn with_grid_points(points: usize) -> Self {
        let alpha_grid = match points {
            0 => Vec::new(),
            1 => vec![0.0],
            _ => (0..points).map(|i| MAX_ALPHA * i as f64 / (points - 1) as f64).collect(),
        };
        Self { alpha_grid, n_samples: 16, fp8_max: E4M3_MAX }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = &self.alpha_grid;
        if grid.first() != Some(&0.0) {
            return Err(Error::InvalidArgument("alpha grid must start at 0".into()));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("alpha grid must be strictly increasing".into()));
        }
        if grid.iter().any(|&a| !(0.0..=MAX_ALPHA).contains(&a)) {
            return Err(Error::InvalidArgument(format!("alpha grid must lie in [0, {MAX_ALPHA}]")));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if !(self.fp8_max > 0.0) {
            return Err(Error::InvalidArgument("fp8_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
}

impl Activation {
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Silu => v / (1.0 + (-v).exp()),
        }
    }
}

/// Up projection `w1` (h x n), down projection `w2` (n x h).
#[derive(Debug, Clone)]
pub struct BlockSpec {
    w1: Tensor,
    w2: Tensor,
    activation: Activation,
}

impl BlockSpec {
    pub fn new(w1: Tensor, w2: Tensor, activation: Activation) -> Result<Self> {
        if w1.shape().len() != 2 || w2.shape().len() != 2 {
            return Err(Error::ShapeMismatch("block weights must be matrices".into()));
        }
        let (h, n) = (w1.rows(), w1.cols());
        if w2.rows() != n || w2.cols() != h {
            return Err(Error::ShapeMismatch(format!("w1 is {h}x{n}, so w2 must be {n}x{h}, got {:?}", w2.shape())));
        }
        Ok(Self { w1, w2, activation })
    }

    pub fn w1(&self) -> &Tensor {
        &self.w1
    }

    pub fn w2(&self) -> &Tensor {
        &self.w2
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Input (and output) width.
    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearchResult {
    pub alpha_star: f64,
    /// Denominator of the block input at `alpha_star`, over the calibration set.
    #[serde(rename = "D")]
    pub denominator_d: f32,
    /// `denominator_d / fp8_max`.
    pub scale: f32,
    /// Denominator of the hidden activation at `alpha_star`.
    pub hidden_denominator: f32,
    pub losses: Vec<GridPoint>,
}

impl ScaleSearchResult {
    pub fn loss_at(&self, alpha: f64) -> Option<f64> {
        self.losses.iter().find(|p| p.alpha == alpha).map(|p| p.loss)
    }

    pub fn best_loss(&self) -> f64 {
        self.loss_at(self.alpha_star).expect("alpha_star is on the grid")
    }
}

/// `D = Outlier(t, alpha)`: the nearest-rank `(1 - alpha)` quantile of `|t|`.
///
/// The rank is `N - floor(alpha * N)`, so `alpha = 0` is exactly `max|t|`.
pub fn outlier_denominator(t: &Tensor, alpha: f64) -> Result<f32> {
    if t.is_empty() {
        return Err(Error::EmptyTensor);
    }
    check_alpha(alpha)?;
    Ok(denominator_of(t.data(), alpha))
}

fn denominator_of(values: &[f32], alpha: f64) -> f32 {
    let n = values.len();
    let dropped = ((alpha * n as f64).floor() as usize).min(n - 1);
    tensor::kth_smallest_abs(values, n - dropped)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=MAX_ALPHA).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, {MAX_ALPHA}]")));
    }
    Ok(())
}

/// FP8 quantize-dequantize with scale `D / fp8_max`; magnitudes above `D` saturate.
pub fn qdq_isolated(t: &Tensor, d: f32, fp8_max: f32) -> Result<Tensor> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidArgument(format!("denominator {d} must be positive")));
    }
    fp8::qdq_tensor(t, d / fp8_max)
}

/// QDQ in place of `src` into `dst`; a zero denominator means `src` is all zeros
/// and is copied through unchanged.
fn isolate_into(src: &[f32], d: f32, fp8_max: f32, dst: &mut Vec<f32>) {
    if d > 0.0 {
        fp8::qdq_slice_into(src, d / fp8_max, dst);
    } else {
        dst.clear();
        dst.extend_from_slice(src);
    }
}

fn matvec_into(w: &Tensor, x: &[f32], out: &mut Vec<f32>) {
    out.clear();
    out.extend((0..w.rows()).map(|r| {
        let mut acc = 0.0f32;
        for (wv, xv) in w.row(r).iter().zip(x) {
            acc += wv * xv;
        }
        acc
    }));
}

/// How activation denominators are obtained for a quantized forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Denominators {
    /// Computed from each activation tensor as it is produced.
    Dynamic { alpha: f64 },
    /// Fixed values, typically calibrated offline.
    Static { input: f32, hidden: f32 },
}

/// Block with its weights already abs-max FP8 quantized.
struct QuantizedBlock<'a> {
    spec: &'a BlockSpec,
    w1: Tensor,
    w2: Tensor,
    fp8_max: f32,
}

impl<'a> QuantizedBlock<'a> {
    fn new(spec: &'a BlockSpec, fp8_max: f32) -> Result<Self> {
        let w1 = fp8::qdq_tensor(&spec.w1, weight_scale(&spec.w1, fp8_max))?;
        let w2 = fp8::qdq_tensor(&spec.w2, weight_scale(&spec.w2, fp8_max))?;
        Ok(Self { spec, w1, w2, fp8_max })
    }

    fn forward(&self, x: &[f32], denoms: Denominators) -> Vec<f32> {
        let (mut xq, mut h, mut a) = (Vec::new(), Vec::new(), Vec::new());
        let d_in = match denoms {
            Denominators::Dynamic { alpha } => denominator_of(x, alpha),
            Denominators::Static { input, .. } => input,
        };
        isolate_into(x, d_in, self.fp8_max, &mut xq);
        matvec_into(&self.w1, &xq, &mut h);
        let act = self.spec.activation;
        h.iter_mut().for_each(|v| *v = act.apply(*v));
        let d_hidden = match denoms {
            Denominators::Dynamic { alpha } => denominator_of(&h, alpha),
            Denominators::Static { hidden, .. } => hidden,
        };
        isolate_into(&h, d_hidden, self.fp8_max, &mut a);
        let mut y = Vec::new();
        matvec_into(&self.w2, &a, &mut y);
        y
    }
}

fn weight_scale(w: &Tensor, fp8_max: f32) -> f32 {
    let m = w.max_abs();
    if m > 0.0 {
        m / fp8_max
    } else {
        1.0
    }
}

fn full_precision(block: &BlockSpec, x: &[f32]) -> Vec<f32> {
    let mut h = Vec::new();
    matvec_into(&block.w1, x, &mut h);
    h.iter_mut().for_each(|v| *v = block.activation.apply(*v));
    let mut y = Vec::new();
    matvec_into(&block.w2, &h, &mut y);
    y
}

fn check_input(block: &BlockSpec, x: &Tensor) -> Result<()> {
    if x.len() != block.dim() {
        return Err(Error::ShapeMismatch(format!(
            "block expects inputs of length {}, got {:?}",
            block.dim(),
            x.shape()
        )));
    }
    Ok(())
}

/// Forward one input through the block.
///
/// `None` is the single-precision reference. `Some(alpha)` quantizes both
/// matmul inputs with denominators taken from those activations at `alpha`,
/// and the weights with abs-max FP8.
pub fn block_forward(block: &BlockSpec, x: &Tensor, alpha: Option<f64>) -> Result<Tensor> {
    match alpha {
        None => block_forward_with(block, x, None),
        Some(alpha) => block_forward_with(block, x, Some(Denominators::Dynamic { alpha })),
    }
}

/// [`block_forward`] with explicit denominators.
pub fn block_forward_with(block: &BlockSpec, x: &Tensor, denoms: Option<Denominators>) -> Result<Tensor> {
    check_input(block, x)?;
    let y = match denoms {
        None => full_precision(block, x.data()),
        Some(d) => {
            if let Denominators::Dynamic { alpha } = d {
                check_alpha(alpha)?;
            }
            QuantizedBlock::new(block, E4M3_MAX)?.forward(x.data(), d)
        }
    };
    Tensor::vector(y)
}

/// Grid search over `cfg.alpha_grid`.
///
/// Denominators are static: for each alpha the input and hidden denominators
/// are calibrated over all calibration activations of that layer, then every
/// sample is pushed through the quantized block. The loss is the mean over
/// samples of the output MSE against the full-precision forward. Ties go to
/// the smaller alpha.
pub fn grid_search(block: &BlockSpec, calib: &[Tensor], cfg: &ScaleSearchConfig) -> Result<ScaleSearchResult> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    for x in calib {
        check_input(block, x)?;
    }

    let mut inputs = Vec::with_capacity(calib.len() * block.dim());
    let mut references = Vec::with_capacity(calib.len());
    for x in calib {
        inputs.extend_from_slice(x.data());
        references.push(full_precision(block, x.data()));
    }

    let qblock = QuantizedBlock::new(block, cfg.fp8_max)?;
    // The hidden denominator is calibrated on the hidden activations produced
    // by the quantized input path, which is what the second matmul sees.
    let evaluate = |alpha: f64| -> (f64, f32, f32) {
        let d_in = denominator_of(&inputs, alpha);
        let mut xq = Vec::new();
        let mut h = Vec::new();
        let mut q_hidden = Vec::with_capacity(calib.len() * block.hidden());
        for x in calib {
            isolate_into(x.data(), d_in, cfg.fp8_max, &mut xq);
            matvec_into(&qblock.w1, &xq, &mut h);
            q_hidden.extend(h.iter().map(|&v| block.activation.apply(v)));
        }
        let d_hidden = denominator_of(&q_hidden, alpha);
        let denoms = Denominators::Static { input: d_in, hidden: d_hidden };
        let total: f64 =
            calib.iter().zip(&references).map(|(x, y)| tensor::mse_slices(y, &qblock.forward(x.data(), denoms))).sum();
        (total / calib.len() as f64, d_in, d_hidden)
    };

    let evaluated: Vec<(f64, f32, f32)> = cfg.alpha_grid.par_iter().map(|&a| evaluate(a)).collect();

    let mut best = 0usize;
    for (i, e) in evaluated.iter().enumerate() {
        if e.0 < evaluated[best].0 {
            best = i;
        }
    }
    let (_, d, d_hidden) = evaluated[best];
    Ok(ScaleSearchResult {
        alpha_star: cfg.alpha_grid[best],
        denominator_d: d,
        scale: if d > 0.0 { d / cfg.fp8_max } else { 1.0 },
        hidden_denominator: d_hidden,
        losses: cfg.alpha_grid.iter().zip(&evaluated).map(|(&alpha, e)| GridPoint { alpha, loss: e.0 }).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{generate, RngSpec};

    fn block(dim: usize, hidden: usize, seed: u64) -> BlockSpec {
        let dist = RngSpec::laplace_outlier(seed, 0.0, 1.0, 0.001, 20.0);
        let w1 = generate(&dist, &[hidden, dim]).unwrap();
        let w2 = generate(&dist.with_seed(seed + 100), &[dim, hidden]).unwrap();
        BlockSpec::new(w1, w2, Activation::Silu).unwrap()
    }

    #[test]
    fn grid_defaults() {
        let cfg = ScaleSearchConfig::default();
        assert_eq!(cfg.alpha_grid.len(), 11);
        assert_eq!(cfg.alpha_grid[0], 0.0);
        assert_eq!(*cfg.alpha_grid.last().unwrap(), MAX_ALPHA);
        assert!(ScaleSearchConfig { alpha_grid: vec![0.0, 0.002], ..cfg.clone() }.validate().is_err());
        assert!(ScaleSearchConfig { alpha_grid: vec![0.0005], ..cfg }.validate().is_err());
    }

    #[test]
    fn alpha_zero_is_abs_max() {
        let t = Tensor::vector(vec![0.5, -3.0, 2.0]).unwrap();
        assert_eq!(outlier_denominator(&t, 0.0).unwrap(), 3.0);
        let plain = fp8::qdq_tensor(&t, 3.0 / E4M3_MAX).unwrap();
        assert_eq!(qdq_isolated(&t, 3.0, E4M3_MAX).unwrap(), plain);
    }

    #[test]
    fn denominator_drops_floor_alpha_n() {
        let t = Tensor::vector((1..=4000).map(|i| i as f32).collect()).unwrap();
        // floor(0.001 * 4000) = 4 magnitudes isolated.
        assert_eq!(outlier_denominator(&t, 0.001).unwrap(), 3996.0);
        assert_eq!(outlier_denominator(&t, 0.0005).unwrap(), 3998.0);
        assert!(outlier_denominator(&t, 0.01).is_err());
    }

    #[test]
    fn denominator_monotone_in_alpha() {
        let t = generate(&RngSpec::laplace_outlier(4, 0.0, 1.0, 0.001, 20.0), &[8192]).unwrap();
        let ds: Vec<f32> =
            ScaleSearchConfig::default().alpha_grid.iter().map(|&a| outlier_denominator(&t, a).unwrap()).collect();
        assert!(ds.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn isolated_values_saturate() {
        let t = Tensor::vector(vec![1.0, -1.0, 100.0, -100.0]).unwrap();
        let q = qdq_isolated(&t, 2.0, E4M3_MAX).unwrap();
        assert_eq!(q.data(), &[1.0, -1.0, 2.0, -2.0]);
        assert!(qdq_isolated(&t, 0.0, E4M3_MAX).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let b = block(8, 16, 1);
        let y = block_forward(&b, &Tensor::vector(vec![0.0; 8]).unwrap(), Some(0.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_search_bounds_and_ties() {
        let b = block(16, 32, 2);
        let calib: Vec<Tensor> = (0..4)
            .map(|i| generate(&RngSpec::laplace_outlier(10 + i, 0.0, 1.0, 0.001, 20.0), &[16]).unwrap())
            .collect();
        let r = grid_search(&b, &calib, &ScaleSearchConfig::default()).unwrap();
        assert!((0.0..=MAX_ALPHA).contains(&r.alpha_star));
        assert!(r.best_loss() <= r.loss_at(0.0).unwrap());
        // 64 calibration values: every grid point isolates nothing, so all
        // losses tie and the smallest alpha wins.
        assert!(r.losses.iter().all(|p| p.loss == r.losses[0].loss));
        assert_eq!(r.alpha_star, 0.0);
        assert_eq!(r.scale, r.denominator_d / E4M3_MAX);
        assert!(grid_search(&b, &[], &ScaleSearchConfig::default()).is_err());
    }
}
