//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report is always printed; exits non-zero if
//! any criterion fails.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lowbit::asq::{self, QuantScheme, QuantizeOptions, QuantizedTensor};
use lowbit::bench::{self, ScaleSearchSuiteConfig};
use lowbit::fp8::{self, decode_e4m3, encode_e4m3, Fp8Code};
use lowbit::seq;
use lowbit::sparse34::{self, AnnealSchedule};
use lowbit::tensor::{self, generate, RngSpec};
use lowbit::ternary::{self, GradMode, LatentWeights, ToyTask};
use lowbit::Error;

mod common;
use common::{deadzone_bias_grad_fd_error, normwise_rel, widen};

/// Pinned tolerances and sizes.
const LUT_REL_TOL: f64 = 1e-5;
const LUT_INSTANCES: u64 = 100;
const LUT_SHAPE: usize = 512;
const FD_REL_TOL: f64 = 1e-4;
const FD_LAYERS: u64 = 50;
const SCALE_SEARCH_SEEDS: u64 = 20;
const SCALE_SEARCH_STRICT_SHARE: f64 = 0.9;
const TOY_SEEDS: u64 = 10;
const TOY_STEPS: usize = 500;
const TOY_LR: f32 = 0.05;
const TOY_REQUIRED: usize = 8;
const ANNEAL_INSTANCES: u64 = 20;
const FP8_SAMPLES: usize = 100_000;
const SEQ_ROWS: u64 = 1000;
const CONTAINER_SHAPE: usize = 4096;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn sparse34_code_space() -> Outcome {
    let start = Instant::now();
    let mut valid = Vec::new();
    for i in 0..81u32 {
        let block: [i8; 4] = std::array::from_fn(|j| ((i / 3u32.pow(j as u32)) % 3) as i8 - 1);
        if block.iter().filter(|&&v| v == 0).count() == 1 {
            valid.push(block);
        }
    }
    let codes: HashSet<u8> = valid.iter().map(|b| sparse34::encode_block(*b).unwrap().get()).collect();
    let bijective = codes.len() == 32
        && codes.iter().all(|&c| c < 32)
        && valid.iter().all(|b| sparse34::decode_block(sparse34::encode_block(*b).unwrap().get()).unwrap() == *b)
        && (0..32u8).all(|c| sparse34::encode_block(sparse34::decode_block(c).unwrap()).unwrap().get() == c);
    let elapsed = start.elapsed();
    outcome(
        valid.len() == 32 && bijective && elapsed < Duration::from_millis(1),
        format!("{} valid blocks, {} distinct codes, bijective={bijective}, {elapsed:?}", valid.len(), codes.len()),
    )
}

/// Header bytes of a container file: everything before the payload.
fn header_len(bytes: &[u8], rows: usize) -> usize {
    let meta_at = 4 + 3 + 16 + 1 + 4 + 4 * rows;
    let meta_len = u32::from_le_bytes(bytes[meta_at..meta_at + 4].try_into().unwrap()) as usize;
    meta_at + 4 + meta_len
}

fn payload_density() -> Outcome {
    let n = CONTAINER_SHAPE;
    let weights = (n * n) as f64;
    let w = generate(&RngSpec::gaussian(0, 0.0, 1.0), &[n, n]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let raw_path = dir.path().join("raw.rtf");
    tensor::write_rtf(&raw_path, &w).unwrap();
    let raw = std::fs::metadata(&raw_path).unwrap().len();

    let mut sizes = Vec::new();
    let mut lines = Vec::new();
    let mut exact = true;
    for (scheme, expected) in [(QuantScheme::Sparse34, 1.25), (QuantScheme::Base3, 5.0 / 3.0), (QuantScheme::Seq2, 2.0)]
    {
        let q = QuantizedTensor::quantize(&w, scheme, QuantizeOptions::default()).unwrap();
        let path = dir.path().join(format!("{scheme:?}.asq"));
        asq::write_asq(&path, &q).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = (bytes.len() - header_len(&bytes, n)) as u64;
        let formula = match scheme {
            QuantScheme::Sparse34 => (n * n / 4 * 5).div_ceil(8),
            QuantScheme::Base3 => ((n * n).div_ceil(3) * 5).div_ceil(8),
            _ => (n * n * 2).div_ceil(8),
        } as u64;
        let bpw = payload as f64 * 8.0 / weights;
        let ok = payload == formula && (bpw - expected).abs() <= 1e-6;
        exact &= ok;
        lines.push(format!("{scheme:?} {bpw:.6} b/w ({} B)", bytes.len()));
        sizes.push(bytes.len() as u64);
    }
    sizes.push(raw);
    let ordered = sizes.windows(2).all(|p| p[0] < p[1]);
    outcome(exact && ordered, format!("{}, raw {raw} B, ordered={ordered}", lines.join(", ")))
}

fn kernel_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for seed in 0..LUT_INSTANCES {
        let (q, x) = bench::sparse34_instance(LUT_SHAPE, LUT_SHAPE, seed).unwrap();
        let naive = sparse34::naive_matvec(&q, &x).unwrap();
        let lut = sparse34::lut_matvec(&q, &x).unwrap();
        worst = worst.max(normwise_rel(&widen(lut.data()), &widen(naive.data())));
        bitwise &= naive == tensor::matvec_dense(&q.dequantize(), &x).unwrap();
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= LUT_REL_TOL && bitwise && elapsed < Duration::from_secs(60),
        format!("max rel dev {worst:.3e} (tol {LUT_REL_TOL:e}), naive==dense bitwise: {bitwise}, {elapsed:.1?}"),
    )
}

fn outlier_search() -> Outcome {
    let start = Instant::now();
    let report =
        bench::run_scale_search_suite(&ScaleSearchSuiteConfig::standard((0..SCALE_SEARCH_SEEDS).collect())).unwrap();
    let elapsed = start.elapsed();
    let in_range = report.rows.iter().all(|r| (0.0..=lowbit::scale_search::MAX_ALPHA).contains(&r.alpha_star));
    outcome(
        report.no_regression_fraction == 1.0
            && report.improvement_fraction >= SCALE_SEARCH_STRICT_SHARE
            && in_range
            && elapsed < Duration::from_secs(60),
        format!(
            "L(a*)<=L(0) on {:.0}%, strict on {:.0}% (need {:.0}%), {} seeds, {elapsed:.1?}",
            100.0 * report.no_regression_fraction,
            100.0 * report.improvement_fraction,
            100.0 * SCALE_SEARCH_STRICT_SHARE,
            report.rows.len()
        ),
    )
}

fn deadzone_gradient() -> Outcome {
    let start = Instant::now();
    let worst =
        (0..FD_LAYERS).map(|i| deadzone_bias_grad_fd_error(1000 + 7 * i, 8, 8, 4, i % 2 == 0)).fold(0.0, f64::max);
    outcome(
        worst <= FD_REL_TOL,
        format!("max rel err {worst:.3e} over {FD_LAYERS} layers (tol {FD_REL_TOL:e}), {:.1?}", start.elapsed()),
    )
}

fn deadzone_escape() -> Outcome {
    let start = Instant::now();
    let results: Vec<(f64, f64, f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..TOY_SEEDS)
            .map(|seed| {
                s.spawn(move || {
                    let task = ToyTask::new(seed);
                    let ste =
                        ternary::train_toy(&task, TOY_STEPS, TOY_LR, ternary::DEFAULT_LAMBDA, GradMode::Ste).unwrap();
                    let teq =
                        ternary::train_toy(&task, TOY_STEPS, TOY_LR, ternary::DEFAULT_LAMBDA, GradMode::DeadzoneBias)
                            .unwrap();
                    (ste.final_deadzone_fraction, teq.final_deadzone_fraction, ste.final_loss, teq.final_loss)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let fewer_dead = results.iter().filter(|r| r.1 < r.0).count();
    let lower_loss = results.iter().filter(|r| r.3 <= r.2).count();
    let elapsed = start.elapsed();
    outcome(
        fewer_dead >= TOY_REQUIRED && lower_loss >= TOY_REQUIRED && elapsed < Duration::from_secs(120),
        format!(
            "smaller deadzone {fewer_dead}/{TOY_SEEDS}, loss <= ste {lower_loss}/{TOY_SEEDS} (need {TOY_REQUIRED}), {elapsed:.1?}"
        ),
    )
}

fn terminal_identity() -> Outcome {
    let mut equal = 0;
    for i in 0..ANNEAL_INSTANCES {
        let rows = 4 + (i as usize % 5) * 3;
        let cols = 4 * (1 + i as usize % 7);
        let w = generate(&RngSpec::gaussian(i, 0.0, 1.0), &[rows, cols]).unwrap();
        let x = generate(&RngSpec::gaussian(i + 500, 0.0, 1.0), &[cols]).unwrap();
        let q = sparse34::sparse34_quantize(&w).unwrap();
        let sched = AnnealSchedule::new(0.5, 100 + i).unwrap();
        let y = sparse34::annealed_forward(&x, &q, &LatentWeights::new(w).unwrap(), sched.total_steps, &sched).unwrap();
        if y == sparse34::naive_matvec(&q, &x).unwrap() {
            equal += 1;
        }
    }
    outcome(equal == ANNEAL_INSTANCES, format!("{equal}/{ANNEAL_INSTANCES} bitwise equal at t = T"))
}

fn fp8_format() -> Outcome {
    let start = Instant::now();
    let round_trip = (0..=255u8).all(|c| {
        let v = decode_e4m3(Fp8Code(c));
        let back = encode_e4m3(v);
        if v.is_nan() {
            back.is_nan()
        } else {
            back == Fp8Code(c)
        }
    });
    let max = (0..=255u8).map(|c| decode_e4m3(Fp8Code(c))).filter(|v| v.is_finite()).fold(f32::MIN, f32::max);
    let mut xs = generate(&RngSpec::gaussian(0, 0.0, 1.0), &[FP8_SAMPLES]).unwrap().into_data();
    // Spread over [-448, 448] with a uniform body.
    for (i, v) in xs.iter_mut().enumerate() {
        *v = -448.0 + 896.0 * ((i as f32 + 0.5 * (1.0 + v.tanh())) / FP8_SAMPLES as f32);
    }
    xs.sort_by(f32::total_cmp);
    let rounded: Vec<f32> = xs.iter().map(|&x| fp8::round_e4m3(x)).collect();
    let monotone = rounded.windows(2).all(|p| p[0] <= p[1]);
    outcome(
        round_trip && max == 448.0 && monotone,
        format!(
            "256-code round trip: {round_trip}, max finite {max}, monotone over {FP8_SAMPLES}: {monotone}, {:.1?}",
            start.elapsed()
        ),
    )
}

fn seq_quantizer() -> Outcome {
    let zero_free = !seq::LEVELS.contains(&0.0)
        && (0..50).all(|s| {
            let w = generate(&RngSpec::laplace(s, 0.0, 1.0), &[8, 33]).unwrap();
            seq::seq_quantize_tuned(&w).unwrap().dequantize().data().iter().all(|&v| v != 0.0)
        });
    let rows = generate(&RngSpec::gaussian(77, 0.0, 1.0), &[SEQ_ROWS as usize, 64]).unwrap();
    let never_worse = (0..SEQ_ROWS as usize).all(|r| {
        let row = rows.row(r);
        let s0 = seq::initial_scale(row);
        seq::row_mse(row, seq::micro_tune_scale(row, s0).unwrap()) <= seq::row_mse(row, s0)
    });
    let bytes_ok = (0..=255u8).all(|b| seq::pack_codes(&seq::unpack_codes(&[b], 4)) == [b]);
    outcome(
        zero_free && never_worse && bytes_ok,
        format!("zero-free: {zero_free}, micro-tune never worse on {SEQ_ROWS} rows: {never_worse}, 256-byte round trip: {bytes_ok}"),
    )
}

fn container() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let w = generate(&RngSpec::laplace(3, 0.0, 1.0), &[9, 24]).unwrap();
    let mut identical = 0;
    let schemes =
        [QuantScheme::Ternary, QuantScheme::DeadzoneBias, QuantScheme::Seq2, QuantScheme::Sparse34, QuantScheme::Base3];
    for scheme in schemes {
        let q = QuantizedTensor::quantize(&w, scheme, QuantizeOptions { micro_tune: true, lambda: None }).unwrap();
        let (a, b) = (dir.path().join("a.asq"), dir.path().join("b.asq"));
        asq::write_asq(&a, &q).unwrap();
        let back = asq::read_asq(&a).unwrap();
        asq::write_asq(&b, &back).unwrap();
        if std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap() && back == q {
            identical += 1;
        }
    }

    let q = QuantizedTensor::quantize(&w, QuantScheme::Sparse34, QuantizeOptions::default()).unwrap();
    let good = asq::encode_asq(&q).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    let mut extended = good.clone();
    extended.push(0);
    let kind = |bytes: &[u8]| match asq::decode_asq(bytes) {
        Err(Error::BadMagic { .. }) => "bad magic",
        Err(Error::UnsupportedVersion(_)) => "unsupported version",
        Err(Error::Truncated(_)) => "truncated",
        Err(Error::PayloadLengthMismatch { .. }) => "length mismatch",
        Err(_) => "other error",
        Ok(_) => "accepted",
    };
    let cases = [
        (kind(&bad_magic), "bad magic"),
        (kind(&bad_version), "unsupported version"),
        (kind(&good[..30]), "truncated"),
        (kind(&good[..good.len() - 1]), "length mismatch"),
        (kind(&extended), "length mismatch"),
    ];
    let errors_ok = cases.iter().all(|(got, want)| got == want);
    outcome(
        identical == schemes.len() && errors_ok,
        format!(
            "byte-identical {identical}/{}, errors: {}",
            schemes.len(),
            cases.iter().map(|(g, _)| *g).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("3:4 code space", sparse34_code_space),
        ("payload density", payload_density),
        ("kernel equivalence", kernel_equivalence),
        ("outlier-isolating search", outlier_search),
        ("deadzone gradient", deadzone_gradient),
        ("deadzone escape", deadzone_escape),
        ("terminal identity", terminal_identity),
        ("fp8 e4m3", fp8_format),
        ("2-bit symmetric", seq_quantizer),
        ("container", container),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == id.to_string()) {
            continue;
        }
        let o = check();
        println!("criterion {id:>2} {:<26} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
