use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lowbit::asq::{self, QuantScheme, QuantizeOptions, QuantizedTensor, TernarySidecar};
use lowbit::bench::{self, JsonlSink, Kernel, SuiteName};
use lowbit::scale_search::{self, Activation, BlockSpec, ScaleSearchConfig};
use lowbit::tensor::{self, RngSpec, Tensor};
use lowbit::{fp8, Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "lowbit", version, about = "Low-bit weight quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a raw tensor file into a packed container.
    Quantize {
        #[arg(long, value_parser = ["ternary", "tequila", "seq2", "sherry", "tl2"])]
        scheme: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Search each row's scale on a small grid (seq2 only).
        #[arg(long)]
        micro_tune: bool,
        /// Deadzone bias coefficient folded into ternary outputs.
        #[arg(long)]
        lambda: Option<f32>,
    },
    /// Expand a container back into a raw tensor file.
    Dequantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a container summary, or the FP8 decode table as CSV.
    Inspect {
        #[arg(long = "in", required_unless_present = "fp8_table")]
        input: Option<PathBuf>,
        #[arg(long)]
        fp8_table: bool,
    },
    /// Time one matvec kernel.
    Bench {
        #[arg(long = "in", conflicts_with = "shape")]
        input: Option<PathBuf>,
        /// Synthetic Gaussian 3:4-sparse tensor of this shape, e.g. 4096x4096.
        #[arg(long, required_unless_present = "input")]
        shape: Option<String>,
        #[arg(long, default_value = "lut", value_parser = ["naive", "lut", "packed"])]
        kernel: String,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Search the outlier fraction for an FP8 feed-forward block.
    #[command(name = "lepto-search")]
    ScaleSearch {
        /// Up and down projection weights: `w1.rtf,w2.rtf`.
        #[arg(long)]
        block: String,
        /// Directory of calibration inputs; each file holds one or more rows.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 11)]
        grid: usize,
    },
    /// Compare a container against its source over calibration inputs.
    Eval {
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        quant: PathBuf,
        #[arg(long)]
        calib: PathBuf,
    },
    /// Run a named experiment suite and write JSON lines.
    Suite {
        #[arg(long, value_parser = ["fidelity", "speed", "lepto"])]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 1 } else { 2 })
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Metadata(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Quantize { scheme, input, out, micro_tune, lambda } => {
            let scheme = QuantScheme::parse(&scheme)?;
            if micro_tune && scheme != QuantScheme::Seq2 {
                return Err(Error::InvalidArgument("--micro-tune applies to seq2 only".into()));
            }
            let w = tensor::read_rtf(&input)?;
            let q = QuantizedTensor::quantize(&w, scheme, QuantizeOptions { micro_tune, lambda })?;
            asq::write_asq(&out, &q)?;
            if matches!(scheme, QuantScheme::Ternary | QuantScheme::DeadzoneBias) {
                let sidecar = TernarySidecar::of(&q)?.expect("ternary scheme");
                let text = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Metadata(e.to_string()))?;
                std::fs::write(sidecar_path(&out), text)?;
            }
            print_json(&asq::inspect(&out)?)
        }
        Command::Dequantize { input, out } => {
            let q = asq::read_asq(&input)?;
            tensor::write_rtf(&out, &q.dequantize()?)
        }
        Command::Inspect { input, fp8_table } => {
            if fp8_table {
                print!("{}", fp8::decode_table_csv());
            }
            match input {
                Some(path) => print_json(&asq::inspect(path)?),
                None => Ok(()),
            }
        }
        Command::Bench { input, shape, kernel, iters, seed } => {
            let kernel = Kernel::parse(&kernel)?;
            let (q, x) = match (input, shape) {
                (Some(path), _) => {
                    let q = asq::read_asq(path)?;
                    let x = tensor::generate(&RngSpec::gaussian(seed, 0.0, 1.0), &[q.cols()])?;
                    (q, x)
                }
                (None, Some(shape)) => {
                    let (rows, cols) = parse_shape(&shape)?;
                    let (s, x) = bench::sparse34_instance(rows, cols, seed)?;
                    (QuantizedTensor::Sparse34(s), x)
                }
                (None, None) => unreachable!("clap requires --in or --shape"),
            };
            let t = bench::time_kernel(&q, kernel, &x, iters)?;
            print_json(&json!({
                "kernel": t.kernel,
                "scheme": q.scheme(),
                "shape": [q.rows(), q.cols()],
                "iters": iters,
                "ns_per_matvec": t.ns_per_matvec,
                "checksum": t.checksum,
            }))
        }
        Command::ScaleSearch { block, calib, grid } => {
            let (p1, p2) =
                block.split_once(',').ok_or_else(|| Error::InvalidArgument("--block expects w1.rtf,w2.rtf".into()))?;
            let block = BlockSpec::new(tensor::read_rtf(p1)?, tensor::read_rtf(p2)?, Activation::Silu)?;
            let cfg = ScaleSearchConfig::with_grid_points(grid);
            print_json(&scale_search::grid_search(&block, &read_calib(&calib)?, &cfg)?)
        }
        Command::Eval { orig, quant, calib } => {
            let w = tensor::read_rtf(&orig)?;
            let q = asq::read_asq(&quant)?;
            let w = Tensor::matrix(w.rows(), w.cols(), w.into_data())?;
            if (w.rows(), w.cols()) != (q.rows(), q.cols()) {
                return Err(Error::ShapeMismatch(format!(
                    "original is {}x{}, container is {}x{}",
                    w.rows(),
                    w.cols(),
                    q.rows(),
                    q.cols()
                )));
            }
            let (mut reference, mut approx) = (Vec::new(), Vec::new());
            for x in read_calib(&calib)? {
                reference.extend(tensor::matvec_dense(&w, &x)?.into_data());
                approx.extend(q.matvec(&x)?.into_data());
            }
            let reference = Tensor::vector(reference)?;
            let approx = Tensor::vector(approx)?;
            print_json(&json!({
                "mse": tensor::mse(&reference, &approx)?,
                "cosine_similarity": tensor::cosine_similarity(reference.data(), approx.data()),
                "bits_per_weight": q.bits_per_weight_payload(),
                "weight_mse": tensor::mse(&w, &q.dequantize()?)?,
            }))
        }
        Command::Suite { name, out } => {
            let name = SuiteName::parse(&name)?;
            let sink = JsonlSink::new(BufWriter::new(File::create(&out)?));
            bench::run_suite(name, &sink)?;
            sink.into_inner().flush()?;
            Ok(())
        }
    }
}

/// `<out>.json` next to the container.
fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("shape {s:?} must look like 4096x4096"));
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if m == 0 || n == 0 {
        return Err(Error::EmptyShape);
    }
    Ok((m, n))
}

/// Every row of every `.rtf` file in `dir`, in file-name order.
fn read_calib(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> =
        std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "rtf"));
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        let t = tensor::read_rtf(&p)?;
        for r in 0..t.rows() {
            rows.push(Tensor::vector(t.row(r).to_vec())?);
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("no .rtf calibration files in {}", dir.display())));
    }
    Ok(rows)
}
