//! Container file for packed quantized tensors.
//!
//! ```text
//! "ASQ1"            4 bytes
//! version           u8   (1)
//! scheme            u8   (0x01 ternary, 0x02 seq2, 0x03 3:4-sparse, 0x04 base-3)
//! ndim              u8
//! dims              ndim x u64
//! scale_layout      u8   (0x01 per-row)
//! scale_count       u32
//! scales            scale_count x f32
//! metadata_len      u32
//! metadata          UTF-8 JSON
//! payload           packed codes, length fixed by scheme and dims
//! ```
//!
//! All multi-byte fields are little-endian. Payload sizes in bits per weight:
//! ternary 2 (codes `00 -> -1`, `01 -> 0`, `10 -> +1`), seq2 2, 3:4-sparse 1.25,
//! base-3 5/3; each payload is padded to a whole byte once.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bits;
use crate::error::{Error, Result};
use crate::seq::{self, SeqTensor};
use crate::sparse34::{self, Base3Tensor, Sparse34Tensor};
use crate::tensor::Tensor;
use crate::ternary::{self, LatentWeights, TernaryTensor};

pub const MAGIC: [u8; 4] = *b"ASQ1";
pub const VERSION: u8 = 1;
pub const SCALE_LAYOUT_PER_ROW: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// 2-bit ternary codes.
    Ternary = 0x01,
    /// 2-bit symmetric levels.
    Seq2 = 0x02,
    /// 3:4-sparse ternary, one 5-bit code per 4 weights.
    #[serde(rename = "sherry")]
    Sparse34 = 0x03,
    /// Dense ternary, one base-3 5-bit code per 3 weights.
    #[serde(rename = "tl2")]
    Base3 = 0x04,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Ternary, Scheme::Seq2, Scheme::Sparse34, Scheme::Base3];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id).ok_or(Error::UnsupportedScheme(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ternary => "ternary",
            Scheme::Seq2 => "seq2",
            Scheme::Sparse34 => "sherry",
            Scheme::Base3 => "tl2",
        }
    }

    /// Stored code bits for a `rows x cols` tensor, before byte padding.
    pub fn payload_bits(self, rows: usize, cols: usize) -> u64 {
        match self {
            Scheme::Ternary | Scheme::Seq2 => 2 * (rows * cols) as u64,
            Scheme::Sparse34 => sparse34::payload_bits(rows, cols),
            Scheme::Base3 => sparse34::base3_payload_bits(rows, cols),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A quantized matrix of any supported scheme.
///
/// Ternary-valued schemes may carry a folded per-row bias from deadzone-bias
/// training; it is added to every matvec output.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedTensor {
    Ternary { q: TernaryTensor, bias: Option<Vec<f32>> },
    Seq2(SeqTensor),
    Sparse34(Sparse34Tensor),
    Base3 { q: Base3Tensor, bias: Option<Vec<f32>> },
}

/// What `quantize` should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    Ternary,
    /// Ternary with the deadzone bias folded into the file.
    #[serde(rename = "tequila")]
    DeadzoneBias,
    Seq2,
    #[serde(rename = "sherry")]
    Sparse34,
    #[serde(rename = "tl2")]
    Base3,
}

impl QuantScheme {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ternary" => Ok(Self::Ternary),
            "tequila" => Ok(Self::DeadzoneBias),
            "seq2" => Ok(Self::Seq2),
            "sherry" => Ok(Self::Sparse34),
            "tl2" => Ok(Self::Base3),
            other => Err(Error::InvalidArgument(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuantizeOptions {
    pub micro_tune: bool,
    /// Deadzone bias coefficient. DeadzoneBias defaults to [`ternary::DEFAULT_LAMBDA`];
    /// for ternary and base-3 a bias is folded only when this is set.
    pub lambda: Option<f32>,
}

impl QuantizedTensor {
    /// Quantize a weight matrix. Tensors with more than two dimensions are
    /// viewed as `rows x last_dim`; vectors as a single row.
    pub fn quantize(w: &Tensor, scheme: QuantScheme, opts: QuantizeOptions) -> Result<Self> {
        let w = Tensor::matrix(w.rows(), w.cols(), w.data().to_vec())?;
        let ternary_with_bias = |lambda: Option<f32>| -> Result<(TernaryTensor, Option<Vec<f32>>)> {
            let latent = LatentWeights::new(w.clone())?;
            let q = ternary::ternarize(&latent);
            match lambda {
                Some(l) => {
                    let q = q.with_lambda(l);
                    let bias = ternary::fold_bias(&q, &latent)?;
                    Ok((q, Some(bias)))
                }
                None => Ok((q.with_lambda(0.0), None)),
            }
        };
        Ok(match scheme {
            QuantScheme::Ternary => {
                let (q, bias) = ternary_with_bias(opts.lambda)?;
                Self::Ternary { q, bias }
            }
            QuantScheme::DeadzoneBias => {
                let (q, bias) = ternary_with_bias(Some(opts.lambda.unwrap_or(ternary::DEFAULT_LAMBDA)))?;
                Self::Ternary { q, bias }
            }
            QuantScheme::Base3 => {
                let (q, bias) = ternary_with_bias(opts.lambda)?;
                Self::Base3 { q: Base3Tensor::pack(&q)?, bias }
            }
            QuantScheme::Seq2 if opts.micro_tune => Self::Seq2(seq::seq_quantize_tuned(&w)?),
            QuantScheme::Seq2 => Self::Seq2(seq::seq_quantize(&w)?),
            QuantScheme::Sparse34 => Self::Sparse34(sparse34::sparse34_quantize(&w)?),
        })
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Self::Ternary { .. } => Scheme::Ternary,
            Self::Seq2(_) => Scheme::Seq2,
            Self::Sparse34(_) => Scheme::Sparse34,
            Self::Base3 { .. } => Scheme::Base3,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Self::Ternary { q, .. } => q.rows(),
            Self::Seq2(q) => q.rows(),
            Self::Sparse34(q) => q.rows(),
            Self::Base3 { q, .. } => q.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Self::Ternary { q, .. } => q.cols(),
            Self::Seq2(q) => q.cols(),
            Self::Sparse34(q) => q.cols(),
            Self::Base3 { q, .. } => q.cols(),
        }
    }

    pub fn scales(&self) -> &[f32] {
        match self {
            Self::Ternary { q, .. } => q.scale_alpha(),
            Self::Seq2(q) => q.scale(),
            Self::Sparse34(q) => q.scale_alpha(),
            Self::Base3 { q, .. } => q.scale_alpha(),
        }
    }

    pub fn bias(&self) -> Option<&[f32]> {
        match self {
            Self::Ternary { bias, .. } | Self::Base3 { bias, .. } => bias.as_deref(),
            _ => None,
        }
    }

    pub fn payload_bits(&self) -> u64 {
        self.scheme().payload_bits(self.rows(), self.cols())
    }

    pub fn bits_per_weight_payload(&self) -> f64 {
        self.payload_bits() as f64 / (self.rows() * self.cols()) as f64
    }

    /// Ternary signs for the ternary-valued schemes.
    fn ternary(&self) -> Result<Option<TernaryTensor>> {
        match self {
            Self::Ternary { q, .. } => Ok(Some(q.clone())),
            Self::Base3 { q, .. } => Ok(Some(q.unpack()?)),
            _ => Ok(None),
        }
    }

    /// Dense weights. The folded bias is not part of the weights.
    pub fn dequantize(&self) -> Result<Tensor> {
        Ok(match self {
            Self::Ternary { q, .. } => q.dequantize(),
            Self::Base3 { q, .. } => q.unpack()?.dequantize(),
            Self::Seq2(q) => q.dequantize(),
            Self::Sparse34(q) => q.dequantize(),
        })
    }

    /// `W_q x + bias` using the scheme's packed kernel.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = match self {
            Self::Seq2(q) => seq::seq_matvec(q, x)?,
            Self::Sparse34(q) => sparse34::lut_matvec(q, x)?,
            _ => {
                let q = self.ternary()?.expect("ternary-valued scheme");
                let xm = Tensor::matrix(1, x.len(), x.data().to_vec())?;
                Tensor::vector(ternary::ternary_matmul(&xm, &q)?.into_data())?
            }
        };
        if let Some(bias) = self.bias() {
            for (v, b) in y.data_mut().iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    fn metadata(&self) -> Metadata {
        match self {
            Self::Ternary { q, bias } => {
                Metadata { delta: Some(q.threshold_delta().to_vec()), lambda: Some(q.lambda()), bias: bias.clone() }
            }
            Self::Base3 { q, bias } => {
                Metadata { delta: Some(q.threshold_delta().to_vec()), lambda: Some(q.lambda()), bias: bias.clone() }
            }
            _ => Metadata::default(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Self::Ternary { q, .. } => {
                let codes: Vec<u8> = q.signs().iter().map(|&s| (s + 1) as u8).collect();
                seq::pack_codes(&codes)
            }
            Self::Seq2(q) => q.packed().to_vec(),
            Self::Sparse34(q) => q.codestream().to_vec(),
            Self::Base3 { q, .. } => q.codestream().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f32>>,
}

/// Serialize to the container layout.
pub fn encode_asq(t: &QuantizedTensor) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&t.metadata()).map_err(|e| Error::Metadata(e.to_string()))?;
    let scales = t.scales();
    let payload = t.payload();
    debug_assert_eq!(payload.len() as u64, bits::bytes_for_bits(t.payload_bits()));

    let mut out = Vec::with_capacity(4 + 3 + 16 + 5 + 4 * scales.len() + 4 + meta.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(t.scheme().id());
    out.push(2);
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    out.push(SCALE_LAYOUT_PER_ROW);
    out.extend_from_slice(&(scales.len() as u32).to_le_bytes());
    for s in scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parsed header fields, before the payload is interpreted.
#[derive(Debug, Clone, PartialEq)]
pub struct AsqHeader {
    pub scheme: Scheme,
    pub dims: Vec<u64>,
    pub scales: Vec<f32>,
    pub metadata: String,
    pub payload_offset: usize,
}

impl AsqHeader {
    pub fn rows(&self) -> usize {
        (self.dims[..self.dims.len() - 1].iter().product::<u64>()) as usize
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap() as usize
    }
}

fn parse_header(bytes: &[u8]) -> Result<AsqHeader> {
    let mut c = Cursor { bytes, pos: 0 };
    let found: [u8; 4] = match c.take(4, "magic") {
        Ok(m) => m.try_into().unwrap(),
        Err(_) => {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(Error::BadMagic { expected: MAGIC, found });
        }
    };
    if found != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found });
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let scheme = Scheme::from_id(c.u8("scheme")?)?;
    let ndim = c.u8("ndim")? as usize;
    if ndim == 0 {
        return Err(Error::EmptyShape);
    }
    let dims = (0..ndim).map(|_| c.u64("dims")).collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(Error::EmptyShape);
    }
    let layout = c.u8("scale layout")?;
    if layout != SCALE_LAYOUT_PER_ROW {
        return Err(Error::Metadata(format!("unknown scale layout 0x{layout:02x}")));
    }
    let scale_count = c.u32("scale count")? as usize;
    let scales = c
        .take(scale_count.checked_mul(4).ok_or(Error::Truncated("scales"))?, "scales")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let meta_len = c.u32("metadata length")? as usize;
    let metadata =
        std::str::from_utf8(c.take(meta_len, "metadata")?).map_err(|e| Error::Metadata(e.to_string()))?.to_owned();
    Ok(AsqHeader { scheme, dims, scales, metadata, payload_offset: c.pos })
}

/// Parse a container and check the payload length against scheme and dims.
pub fn decode_asq(bytes: &[u8]) -> Result<QuantizedTensor> {
    let h = parse_header(bytes)?;
    let (rows, cols) = (h.rows(), h.cols());
    let payload = &bytes[h.payload_offset..];
    let expected = bits::bytes_for_bits(h.scheme.payload_bits(rows, cols));
    if payload.len() as u64 != expected {
        return Err(Error::PayloadLengthMismatch { expected, found: payload.len() as u64 });
    }
    if h.scales.len() != rows {
        return Err(Error::ShapeMismatch(format!("{} scales for {rows} rows", h.scales.len())));
    }
    let meta: Metadata = serde_json::from_str(&h.metadata).map_err(|e| Error::Metadata(e.to_string()))?;
    let ternary_meta = |meta: &Metadata| -> Result<(Vec<f32>, f32)> {
        let delta = meta.delta.clone().ok_or_else(|| Error::Metadata("missing delta".into()))?;
        let lambda = meta.lambda.ok_or_else(|| Error::Metadata("missing lambda".into()))?;
        if let Some(bias) = &meta.bias {
            if bias.len() != rows {
                return Err(Error::Metadata(format!("bias of length {} for {rows} rows", bias.len())));
            }
        }
        Ok((delta, lambda))
    };
    Ok(match h.scheme {
        Scheme::Ternary => {
            let (delta, lambda) = ternary_meta(&meta)?;
            let codes = seq::unpack_codes(payload, rows * cols);
            if codes.contains(&3) {
                return Err(Error::InvalidBlock("reserved ternary code 0b11".into()));
            }
            let signs = codes.iter().map(|&c| c as i8 - 1).collect();
            let q = TernaryTensor::from_parts(rows, cols, signs, h.scales, delta, lambda)?;
            QuantizedTensor::Ternary { q, bias: meta.bias }
        }
        Scheme::Base3 => {
            let (delta, lambda) = ternary_meta(&meta)?;
            let q = Base3Tensor::from_parts(rows, cols, payload.to_vec(), h.scales, delta, lambda)?;
            // Reject out-of-range codes now rather than at first use.
            q.unpack()?;
            QuantizedTensor::Base3 { q, bias: meta.bias }
        }
        Scheme::Seq2 => QuantizedTensor::Seq2(SeqTensor::from_parts(rows, cols, payload.to_vec(), h.scales)?),
        Scheme::Sparse34 => {
            QuantizedTensor::Sparse34(Sparse34Tensor::from_parts(rows, cols, payload.to_vec(), h.scales)?)
        }
    })
}

/// Write atomically (temporary file, then rename).
pub fn write_asq(path: impl AsRef<Path>, t: &QuantizedTensor) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), &encode_asq(t)?)
}

pub fn read_asq(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    decode_asq(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub scheme: Scheme,
    pub dims: Vec<u64>,
    pub bits_per_weight_payload: f64,
    pub total_bytes: u64,
    /// Whole file size, header and scales included, per weight.
    pub bits_per_weight_effective: f64,
}

pub fn inspect_bytes(bytes: &[u8]) -> Result<InspectReport> {
    let t = decode_asq(bytes)?;
    let weights = (t.rows() * t.cols()) as f64;
    let h = parse_header(bytes)?;
    Ok(InspectReport {
        scheme: t.scheme(),
        dims: h.dims,
        bits_per_weight_payload: t.bits_per_weight_payload(),
        total_bytes: bytes.len() as u64,
        bits_per_weight_effective: bytes.len() as f64 * 8.0 / weights,
    })
}

pub fn inspect(path: impl AsRef<Path>) -> Result<InspectReport> {
    inspect_bytes(&std::fs::read(path)?)
}

/// JSON sidecar written next to ternary outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TernarySidecar {
    pub delta: Vec<f32>,
    pub alpha: Vec<f32>,
    pub lambda: f32,
    pub deadzone_fraction: f64,
}

impl TernarySidecar {
    pub fn of(t: &QuantizedTensor) -> Result<Option<Self>> {
        Ok(t.ternary()?.map(|q| Self {
            delta: q.threshold_delta().to_vec(),
            alpha: q.scale_alpha().to_vec(),
            lambda: q.lambda(),
            deadzone_fraction: ternary::deadzone_fraction(&q),
        }))
    }
}
