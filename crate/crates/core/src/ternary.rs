//! Ternary weight quantization with a deadzone-bias training surrogate.
//!
//! Each row is quantized to `alpha * {-1, 0, +1}` with threshold
//! `delta = 0.7 * mean|w|` and `alpha = mean|w|` over the retained entries.
//! Entries with `|w| < delta` form the deadzone. During training the
//! deadzone weights are reused as a row bias `lambda * sum(w_dead)`, which
//! gives them a direct gradient; after training the bias is folded into a
//! constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, RngSpec, Tensor};

pub const DEFAULT_LAMBDA: f32 = 0.1;
const THRESHOLD_FACTOR: f64 = 0.7;

/// Continuous weights being trained (rows x cols).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWeights(pub Tensor);

impl LatentWeights {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!("latent weights must be a matrix, got {:?}", w.shape())));
        }
        if !w.is_finite() {
            return Err(Error::InvalidArgument("latent weights must be finite".into()));
        }
        Ok(Self(w))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryTensor {
    rows: usize,
    cols: usize,
    signs: Vec<i8>,
    scale_alpha: Vec<f32>,
    threshold_delta: Vec<f32>,
    deadzone_mask: Vec<bool>,
    lambda: f32,
}

impl TernaryTensor {
    /// Build from stored parts. The deadzone is taken to be the zero signs.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        signs: Vec<i8>,
        scale_alpha: Vec<f32>,
        threshold_delta: Vec<f32>,
        lambda: f32,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape);
        }
        if signs.len() != rows * cols || scale_alpha.len() != rows || threshold_delta.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} ternary tensor needs {} signs and {rows} scales",
                rows * cols
            )));
        }
        if let Some(bad) = signs.iter().find(|s| !(-1..=1).contains(*s)) {
            return Err(Error::InvalidArgument(format!("sign {bad} is not ternary")));
        }
        let deadzone_mask = signs.iter().map(|&s| s == 0).collect();
        Ok(Self { rows, cols, signs, scale_alpha, threshold_delta, deadzone_mask, lambda })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn row_signs(&self, r: usize) -> &[i8] {
        &self.signs[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scale_alpha(&self) -> &[f32] {
        &self.scale_alpha
    }

    pub fn threshold_delta(&self) -> &[f32] {
        &self.threshold_delta
    }

    pub fn deadzone_mask(&self) -> &[bool] {
        &self.deadzone_mask
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    pub fn with_lambda(mut self, lambda: f32) -> Self {
        self.lambda = lambda;
        self
    }

    /// `alpha_r * signs[r, c]`.
    pub fn dequantize(&self) -> Tensor {
        let data = self
            .signs
            .chunks_exact(self.cols)
            .zip(&self.scale_alpha)
            .flat_map(|(row, &a)| row.iter().map(move |&s| a * s as f32))
            .collect();
        Tensor::matrix(self.rows, self.cols, data).expect("shape checked at construction")
    }
}

/// `0.7 * mean|w|` over the row.
pub fn compute_threshold(row: &[f32]) -> f32 {
    if row.is_empty() {
        return 0.0;
    }
    let mean = row.iter().map(|v| v.abs() as f64).sum::<f64>() / row.len() as f64;
    (THRESHOLD_FACTOR * mean) as f32
}

/// Quantize every row; `lambda` is [`DEFAULT_LAMBDA`].
pub fn ternarize(w: &LatentWeights) -> TernaryTensor {
    let (rows, cols) = (w.rows(), w.cols());
    let mut signs = Vec::with_capacity(rows * cols);
    let mut alpha = Vec::with_capacity(rows);
    let mut delta = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.0.row(r);
        let d = compute_threshold(row);
        let (mut kept, mut sum) = (0usize, 0.0f64);
        for &v in row {
            // An all-zero row has delta 0 and stays entirely in the deadzone.
            let s = if d > 0.0 && v >= d {
                1
            } else if d > 0.0 && v <= -d {
                -1
            } else {
                0
            };
            if s != 0 {
                kept += 1;
                sum += v.abs() as f64;
            }
            signs.push(s);
        }
        alpha.push(if kept > 0 { (sum / kept as f64) as f32 } else { 0.0 });
        delta.push(d);
    }
    TernaryTensor::from_parts(rows, cols, signs, alpha, delta, DEFAULT_LAMBDA).expect("consistent by construction")
}

/// Share of weights in the deadzone.
pub fn deadzone_fraction(q: &TernaryTensor) -> f64 {
    let dead = q.deadzone_mask.iter().filter(|&&d| d).count();
    dead as f64 / q.deadzone_mask.len() as f64
}

/// View `x` as a batch of row vectors of width `cols`.
fn batch_of(x: &Tensor, cols: usize) -> Result<usize> {
    if x.cols() != cols || x.shape().len() > 2 {
        return Err(Error::ShapeMismatch(format!("input {:?} does not have {cols} columns", x.shape())));
    }
    Ok(x.rows())
}

fn check_pair(q: &TernaryTensor, w: &LatentWeights) -> Result<()> {
    if w.rows() != q.rows || w.cols() != q.cols {
        return Err(Error::ShapeMismatch(format!(
            "latent weights {:?} do not match {}x{} ternary tensor",
            w.0.shape(),
            q.rows,
            q.cols
        )));
    }
    Ok(())
}

/// `Y = X (alpha * signs)^T + bias`, one ternary row sum per output.
fn ternary_forward(x: &Tensor, q: &TernaryTensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let b = batch_of(x, q.cols)?;
    let mut y = Vec::with_capacity(b * q.rows);
    for i in 0..b {
        let xi = x.row(i);
        for r in 0..q.rows {
            let mut acc = 0.0f32;
            for (&s, &xv) in q.row_signs(r).iter().zip(xi) {
                match s {
                    1 => acc += xv,
                    -1 => acc -= xv,
                    _ => {}
                }
            }
            let mut out = q.scale_alpha[r] * acc;
            if let Some(bias) = bias {
                out += bias[r];
            }
            y.push(out);
        }
    }
    Tensor::matrix(b, q.rows, y)
}

/// Plain ternary forward without the deadzone bias.
pub fn ternary_matmul(x: &Tensor, q: &TernaryTensor) -> Result<Tensor> {
    ternary_forward(x, q, None)
}

/// `Y = X Q(W)^T + C(W)` with `C_r = lambda * sum_{c in deadzone_r} w[r, c]`.
///
/// The bias does not depend on the input.
pub fn deadzone_bias_forward(x: &Tensor, q: &TernaryTensor, w: &LatentWeights) -> Result<Tensor> {
    let bias = fold_bias(q, w)?;
    ternary_forward(x, q, Some(&bias))
}

/// Inference with a bias folded offline by [`fold_bias`].
pub fn folded_forward(x: &Tensor, q: &TernaryTensor, bias: &[f32]) -> Result<Tensor> {
    if bias.len() != q.rows {
        return Err(Error::ShapeMismatch(format!("bias of length {} for {} rows", bias.len(), q.rows)));
    }
    ternary_forward(x, q, Some(bias))
}

/// Constant per-row bias `lambda * sum(w_dead)`.
pub fn fold_bias(q: &TernaryTensor, w: &LatentWeights) -> Result<Vec<f32>> {
    check_pair(q, w)?;
    Ok((0..q.rows)
        .map(|r| {
            let mask = &q.deadzone_mask[r * q.cols..(r + 1) * q.cols];
            let dead_sum: f32 = w.0.row(r).iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).sum();
            q.lambda * dead_sum
        })
        .collect())
}

/// Gradient of the loss with respect to the latent weights.
///
/// Every entry gets the straight-through term `sum_b dY[b, r] * x[b, c]`;
/// deadzone entries additionally get `lambda * sum_b dY[b, r]` from the bias.
pub fn deadzone_bias_grad(x: &Tensor, q: &TernaryTensor, w: &LatentWeights, d_y: &Tensor) -> Result<Tensor> {
    check_pair(q, w)?;
    let b = batch_of(x, q.cols)?;
    if d_y.len() != b * q.rows {
        return Err(Error::ShapeMismatch(format!(
            "output gradient {:?} does not match batch {b} x {} outputs",
            d_y.shape(),
            q.rows
        )));
    }
    let (m, n) = (q.rows, q.cols);
    let dy = d_y.data();
    let mut grad = vec![0.0f32; m * n];
    for r in 0..m {
        let g_row = &mut grad[r * n..(r + 1) * n];
        let mut dy_sum = 0.0f32;
        for i in 0..b {
            let g = dy[i * m + r];
            dy_sum += g;
            for (gc, &xv) in g_row.iter_mut().zip(x.row(i)) {
                *gc += g * xv;
            }
        }
        let mask = &q.deadzone_mask[r * n..(r + 1) * n];
        let bias_grad = q.lambda * dy_sum;
        for (gc, &dead) in g_row.iter_mut().zip(mask) {
            if dead {
                *gc += bias_grad;
            }
        }
    }
    Tensor::matrix(m, n, grad)
}

// ---------------------------------------------------------------------------
// Toy training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Straight-through estimator only.
    Ste,
    /// Straight-through plus the deadzone bias path.
    DeadzoneBias,
}

/// Fixed synthetic regression: targets come from a hidden dense teacher layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub seed: u64,
    pub outputs: usize,
    pub inputs: usize,
    pub batch: usize,
    /// Mean of the input features.
    pub input_mean: f64,
    /// Standard deviation of the student's initial latent weights.
    pub init_stdev: f64,
}

impl ToyTask {
    pub fn new(seed: u64) -> Self {
        Self { seed, outputs: 16, inputs: 32, batch: 64, input_mean: 0.5, init_stdev: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub loss: f64,
    pub deadzone_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub mode: GradMode,
    pub steps: Vec<TraceStep>,
    /// Loss and deadzone share of the weights left after the last update.
    pub final_loss: f64,
    pub final_deadzone_fraction: f64,
}

struct ToyData {
    x: Tensor,
    targets: Tensor,
}

impl ToyTask {
    fn data(&self) -> Result<ToyData> {
        let teacher = tensor::generate(&RngSpec::gaussian(self.seed, 0.0, 1.0), &[self.outputs, self.inputs])?;
        let x = tensor::generate(
            &RngSpec::gaussian(self.seed.wrapping_add(1), self.input_mean, 1.0),
            &[self.batch, self.inputs],
        )?;
        let mut t = Vec::with_capacity(self.batch * self.outputs);
        for i in 0..self.batch {
            t.extend(tensor::matvec_dense(&teacher, &Tensor::vector(x.row(i).to_vec())?)?.into_data());
        }
        Ok(ToyData { x, targets: Tensor::matrix(self.batch, self.outputs, t)? })
    }

    fn init(&self) -> Result<LatentWeights> {
        LatentWeights::new(tensor::generate(
            &RngSpec::gaussian(self.seed.wrapping_add(2), 0.0, self.init_stdev),
            &[self.outputs, self.inputs],
        )?)
    }
}

/// Loss `mean((Y - T)^2)` and its gradient with respect to `Y`.
fn mse_and_grad(y: &Tensor, t: &Tensor) -> (f64, Tensor) {
    let scale = 2.0 / y.len() as f32;
    let grad = y.data().iter().zip(t.data()).map(|(&a, &b)| scale * (a - b)).collect();
    (tensor::mse_slices(y.data(), t.data()), Tensor::new(y.shape().to_vec(), grad).expect("same shape"))
}

fn forward_for(mode: GradMode, x: &Tensor, q: &TernaryTensor, w: &LatentWeights) -> Result<Tensor> {
    match mode {
        GradMode::Ste => ternary_matmul(x, q),
        GradMode::DeadzoneBias => deadzone_bias_forward(x, q, w),
    }
}

/// Train a student on `task` with plain gradient descent.
///
/// The quantizer (threshold, scale, deadzone) is recomputed from the latent
/// weights every step. In `Ste` mode the bias path is disabled (`lambda = 0`).
pub fn train_toy(task: &ToyTask, steps: usize, lr: f32, lambda: f32, mode: GradMode) -> Result<TrainTrace> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    let lambda = match mode {
        GradMode::Ste => 0.0,
        GradMode::DeadzoneBias => lambda,
    };
    let data = task.data()?;
    let mut w = task.init()?;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let q = ternarize(&w).with_lambda(lambda);
        let y = forward_for(mode, &data.x, &q, &w)?;
        let (loss, d_y) = mse_and_grad(&y, &data.targets);
        trace.push(TraceStep { loss, deadzone_fraction: deadzone_fraction(&q) });
        let grad = deadzone_bias_grad(&data.x, &q, &w, &d_y)?;
        let mut next = w.0;
        for (v, g) in next.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
        w = LatentWeights(next);
    }
    let q = ternarize(&w).with_lambda(lambda);
    let y = forward_for(mode, &data.x, &q, &w)?;
    Ok(TrainTrace {
        mode,
        steps: trace,
        final_loss: mse_and_grad(&y, &data.targets).0,
        final_deadzone_fraction: deadzone_fraction(&q),
    })
}
