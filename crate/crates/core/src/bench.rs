//! Experiment drivers producing JSON-lines reports.
//!
//! Every report carries `schema_version` and the full generator and config it
//! was produced from, so any row can be regenerated exactly.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asq::{QuantScheme, QuantizeOptions, QuantizedTensor};
use crate::error::{Error, Result};
use crate::scale_search::{self, Activation, BlockSpec, ScaleSearchConfig};
use crate::sparse34::{self, Sparse34Tensor};
use crate::tensor::{self, RngSpec, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const TIMING_RUNS: usize = 5;
pub const MIN_SCALE_SEARCH_SEEDS: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityConfig {
    pub scheme: QuantScheme,
    pub weights: RngSpec,
    pub activations: RngSpec,
    pub shape: [usize; 2],
    pub calib_count: usize,
    #[serde(default)]
    pub options: FidelityOptions,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityOptions {
    pub micro_tune: bool,
    pub lambda: Option<f32>,
}

impl FidelityConfig {
    /// Weights from `dist`; activations are standard Gaussian on the next seed.
    pub fn new(scheme: QuantScheme, dist: RngSpec, shape: [usize; 2], calib_count: usize) -> Self {
        let activations = RngSpec::gaussian(dist.seed.wrapping_add(1), 0.0, 1.0);
        Self { scheme, weights: dist, activations, shape, calib_count, options: FidelityOptions::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    pub schema_version: u32,
    pub experiment: String,
    pub config: FidelityConfig,
    pub scheme: QuantScheme,
    pub weight_mse: f64,
    pub output_mse: f64,
    pub output_cosine: f64,
    pub bits_per_weight: f64,
}

/// Reconstruction error of `w` and of its matvecs over calibration inputs.
pub fn fidelity_of(scheme: QuantScheme, w: &Tensor, calib: &[Tensor], opts: FidelityOptions) -> Result<FidelityScores> {
    let q = QuantizedTensor::quantize(w, scheme, QuantizeOptions { micro_tune: opts.micro_tune, lambda: opts.lambda })?;
    let weight_mse = tensor::mse(w, &q.dequantize()?)?;
    let (mut reference, mut approx) = (Vec::new(), Vec::new());
    for x in calib {
        reference.extend(tensor::matvec_dense(w, x)?.into_data());
        approx.extend(q.matvec(x)?.into_data());
    }
    Ok(FidelityScores {
        weight_mse,
        output_mse: tensor::mse_slices(&reference, &approx),
        output_cosine: tensor::cosine_similarity(&reference, &approx),
        bits_per_weight: q.bits_per_weight_payload(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityScores {
    pub weight_mse: f64,
    pub output_mse: f64,
    pub output_cosine: f64,
    pub bits_per_weight: f64,
}

pub fn run_fidelity(cfg: &FidelityConfig) -> Result<FidelityReport> {
    if cfg.calib_count == 0 {
        return Err(Error::InvalidArgument("calib_count must be >= 1".into()));
    }
    let [rows, cols] = cfg.shape;
    let w = tensor::generate(&cfg.weights, &[rows, cols])?;
    let xs = tensor::generate(&cfg.activations, &[cfg.calib_count, cols])?;
    let calib = (0..cfg.calib_count).map(|i| Tensor::vector(xs.row(i).to_vec())).collect::<Result<Vec<_>>>()?;
    let s = fidelity_of(cfg.scheme, &w, &calib, cfg.options)?;
    Ok(FidelityReport {
        schema_version: SCHEMA_VERSION,
        experiment: "fidelity".into(),
        config: cfg.clone(),
        scheme: cfg.scheme,
        weight_mse: s.weight_mse,
        output_mse: s.output_mse,
        output_cosine: s.output_cosine,
        bits_per_weight: s.bits_per_weight,
    })
}

// ---------------------------------------------------------------------------
// Speed
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Per-weight multiply-accumulate over unpacked codes.
    Naive,
    /// Per-group lookup tables.
    Lut,
    /// The scheme's packed kernel.
    Packed,
}

impl Kernel {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "naive" => Ok(Self::Naive),
            "lut" => Ok(Self::Lut),
            "packed" => Ok(Self::Packed),
            other => Err(Error::InvalidArgument(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedConfig {
    pub scheme: QuantScheme,
    pub weights: RngSpec,
    pub activations: RngSpec,
    pub shape: [usize; 2],
    pub iters: usize,
}

impl SpeedConfig {
    pub fn new(scheme: QuantScheme, shape: [usize; 2], iters: usize, seed: u64) -> Self {
        Self {
            scheme,
            weights: RngSpec::gaussian(seed, 0.0, 1.0),
            activations: RngSpec::gaussian(seed.wrapping_add(1), 0.0, 1.0),
            shape,
            iters,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelTiming {
    pub kernel: Kernel,
    pub ns_per_matvec: f64,
    /// Sum of one matvec's outputs, accumulated in f64.
    pub checksum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedReport {
    pub schema_version: u32,
    pub experiment: String,
    pub config: SpeedConfig,
    pub kernels: Vec<KernelTiming>,
}

pub fn checksum(y: &Tensor) -> f64 {
    y.data().iter().map(|&v| v as f64).sum()
}

/// Median over [`TIMING_RUNS`] runs of `iters` calls, after one discarded
/// warmup run, in nanoseconds per call.
pub fn time_per_call(iters: usize, mut f: impl FnMut()) -> Result<f64> {
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be >= 1".into()));
    }
    let mut run = || {
        let start = Instant::now();
        for _ in 0..iters {
            f();
        }
        start.elapsed().as_nanos() as f64 / iters as f64
    };
    run();
    let mut runs: Vec<f64> = (0..TIMING_RUNS).map(|_| run()).collect();
    runs.sort_by(f64::total_cmp);
    Ok(runs[TIMING_RUNS / 2])
}

/// Kernels that apply to a quantized tensor.
pub fn kernels_for(q: &QuantizedTensor) -> Vec<Kernel> {
    match q {
        QuantizedTensor::Sparse34(_) => vec![Kernel::Naive, Kernel::Lut],
        _ => vec![Kernel::Packed],
    }
}

pub fn run_kernel(q: &QuantizedTensor, kernel: Kernel, x: &Tensor) -> Result<Tensor> {
    match (q, kernel) {
        (QuantizedTensor::Sparse34(s), Kernel::Naive) => sparse34::naive_matvec(s, x),
        (QuantizedTensor::Sparse34(s), Kernel::Lut) => sparse34::lut_matvec(s, x),
        (_, Kernel::Packed) => q.matvec(x),
        (_, k) => Err(Error::InvalidArgument(format!("kernel {k:?} does not apply to {}", q.scheme()))),
    }
}

/// Time one kernel on `q`.
pub fn time_kernel(q: &QuantizedTensor, kernel: Kernel, x: &Tensor, iters: usize) -> Result<KernelTiming> {
    let y = run_kernel(q, kernel, x)?;
    let ns = time_per_call(iters, || {
        std::hint::black_box(run_kernel(q, kernel, std::hint::black_box(x)).expect("checked above"));
    })?;
    Ok(KernelTiming { kernel, ns_per_matvec: ns, checksum: checksum(&y) })
}

pub fn run_speed(cfg: &SpeedConfig) -> Result<SpeedReport> {
    let [rows, cols] = cfg.shape;
    let w = tensor::generate(&cfg.weights, &[rows, cols])?;
    let x = tensor::generate(&cfg.activations, &[cols])?;
    let q = QuantizedTensor::quantize(&w, cfg.scheme, QuantizeOptions::default())?;
    let kernels = kernels_for(&q).into_iter().map(|k| time_kernel(&q, k, &x, cfg.iters)).collect::<Result<Vec<_>>>()?;
    Ok(SpeedReport { schema_version: SCHEMA_VERSION, experiment: "speed".into(), config: cfg.clone(), kernels })
}

/// Sparse34 tensor for standalone kernel benchmarks.
pub fn sparse34_instance(rows: usize, cols: usize, seed: u64) -> Result<(Sparse34Tensor, Tensor)> {
    let w = tensor::generate(&RngSpec::gaussian(seed, 0.0, 1.0), &[rows, cols])?;
    let x = tensor::generate(&RngSpec::gaussian(seed.wrapping_add(1), 0.0, 1.0), &[cols])?;
    Ok((sparse34::sparse34_quantize(&w)?, x))
}

// ---------------------------------------------------------------------------
// Outlier-isolation search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSearchSuiteConfig {
    pub seeds: Vec<u64>,
    /// Family of both weights and activations; the seed is replaced per draw.
    pub dist: RngSpec,
    pub dim: usize,
    pub hidden: usize,
    pub calib_count: usize,
    pub search: ScaleSearchConfig,
}

impl ScaleSearchSuiteConfig {
    /// `laplace_outlier(0, 1, 0.001, 20)` on a 64 -> 256 -> 64 block.
    pub fn standard(seeds: Vec<u64>) -> Self {
        Self {
            seeds,
            dist: RngSpec::laplace_outlier(0, 0.0, 1.0, 0.001, 20.0),
            dim: 64,
            hidden: 256,
            calib_count: 16,
            search: ScaleSearchConfig::default(),
        }
    }

    /// Generators for one seed: `w1`, `w2`, calibration inputs.
    pub fn specs_for(&self, seed: u64) -> [RngSpec; 3] {
        let base = seed.wrapping_mul(3);
        [0, 1, 2].map(|i| self.dist.with_seed(base.wrapping_add(i)))
    }

    pub fn instance(&self, seed: u64) -> Result<(BlockSpec, Vec<Tensor>)> {
        let [s1, s2, sx] = self.specs_for(seed);
        let w1 = tensor::generate(&s1, &[self.hidden, self.dim])?;
        let w2 = tensor::generate(&s2, &[self.dim, self.hidden])?;
        let xs = tensor::generate(&sx, &[self.calib_count, self.dim])?;
        let calib = (0..self.calib_count).map(|i| Tensor::vector(xs.row(i).to_vec())).collect::<Result<Vec<_>>>()?;
        Ok((BlockSpec::new(w1, w2, Activation::Silu)?, calib))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSearchSeedRow {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub rng: [RngSpec; 3],
    pub loss_at_zero: f64,
    pub loss_at_best: f64,
    pub alpha_star: f64,
    pub strict_improvement: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSearchSuiteReport {
    pub schema_version: u32,
    pub experiment: String,
    pub config: ScaleSearchSuiteConfig,
    pub rows: Vec<ScaleSearchSeedRow>,
    /// Share of seeds with `L(alpha*) <= L(0)`.
    pub no_regression_fraction: f64,
    /// Share of seeds with `L(alpha*) < L(0)`.
    pub improvement_fraction: f64,
}

pub fn run_scale_search_seed(cfg: &ScaleSearchSuiteConfig, seed: u64) -> Result<ScaleSearchSeedRow> {
    let (block, calib) = cfg.instance(seed)?;
    let r = scale_search::grid_search(&block, &calib, &cfg.search)?;
    let loss_at_zero = r.loss_at(0.0).expect("grid starts at 0");
    let loss_at_best = r.best_loss();
    Ok(ScaleSearchSeedRow {
        schema_version: SCHEMA_VERSION,
        experiment: "scale_search_seed".into(),
        seed,
        rng: cfg.specs_for(seed),
        loss_at_zero,
        loss_at_best,
        alpha_star: r.alpha_star,
        strict_improvement: loss_at_best < loss_at_zero,
    })
}

pub fn run_scale_search_suite(cfg: &ScaleSearchSuiteConfig) -> Result<ScaleSearchSuiteReport> {
    if cfg.seeds.len() < MIN_SCALE_SEARCH_SEEDS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SCALE_SEARCH_SEEDS} seeds, got {}",
            cfg.seeds.len()
        )));
    }
    let rows = cfg.seeds.par_iter().map(|&s| run_scale_search_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let share = |f: fn(&ScaleSearchSeedRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(ScaleSearchSuiteReport {
        schema_version: SCHEMA_VERSION,
        experiment: "scale_search_suite".into(),
        config: cfg.clone(),
        no_regression_fraction: share(|r| r.loss_at_best <= r.loss_at_zero),
        improvement_fraction: share(|r| r.strict_improvement),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

/// Serialized writer of JSON lines shared by concurrent experiments.
pub struct JsonlSink<W: Write> {
    inner: Mutex<W>,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(w: W) -> Self {
        Self { inner: Mutex::new(w) }
    }

    pub fn emit<T: Serialize>(&self, row: &T) -> Result<()> {
        let mut line = serde_json::to_vec(row).map_err(|e| Error::Metadata(e.to_string()))?;
        line.push(b'\n');
        let mut w = self.inner.lock().expect("sink poisoned");
        w.write_all(&line)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner.into_inner().expect("sink poisoned")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    Fidelity,
    Speed,
    #[serde(rename = "lepto")]
    ScaleSearch,
}

impl SuiteName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fidelity" => Ok(Self::Fidelity),
            "speed" => Ok(Self::Speed),
            "lepto" => Ok(Self::ScaleSearch),
            other => Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
        }
    }
}

const ALL_SCHEMES: [QuantScheme; 5] =
    [QuantScheme::Ternary, QuantScheme::DeadzoneBias, QuantScheme::Seq2, QuantScheme::Sparse34, QuantScheme::Base3];

fn standard_fidelity() -> Vec<FidelityConfig> {
    let dists = [RngSpec::gaussian(0, 0.0, 1.0), RngSpec::laplace(1, 0.0, 1.0)];
    let mut out = Vec::new();
    for dist in dists {
        for scheme in ALL_SCHEMES {
            out.push(FidelityConfig::new(scheme, dist, [256, 512], 32));
        }
        let mut tuned = FidelityConfig::new(QuantScheme::Seq2, dist, [256, 512], 32);
        tuned.options.micro_tune = true;
        out.push(tuned);
    }
    out
}

/// Run a named suite, writing one JSON line per experiment (plus a summary
/// line for `scale_search`) in a deterministic order.
pub fn run_suite<W: Write + Send>(name: SuiteName, sink: &JsonlSink<W>) -> Result<()> {
    match name {
        SuiteName::Fidelity => {
            let reports = standard_fidelity().par_iter().map(run_fidelity).collect::<Result<Vec<_>>>()?;
            reports.iter().try_for_each(|r| sink.emit(r))
        }
        SuiteName::Speed => {
            // Timed sequentially so experiments do not contend for cores.
            for scheme in ALL_SCHEMES {
                sink.emit(&run_speed(&SpeedConfig::new(scheme, [1024, 1024], 20, 0))?)?;
            }
            Ok(())
        }
        SuiteName::ScaleSearch => {
            let report = run_scale_search_suite(&ScaleSearchSuiteConfig::standard((0..20).collect()))?;
            report.rows.iter().try_for_each(|r| sink.emit(r))?;
            sink.emit(&report)
        }
    }
}
