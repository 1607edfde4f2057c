//! Software FP8-E4M3 (finite-only variant).
//!
//! Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits. There are no
//! infinities; `S.1111.111` is NaN and the largest finite magnitude is 448.
//! Encoding rounds to nearest with ties to even mantissa and saturates
//! overflow to ±448.

use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const E4M3_MAX: f32 = 448.0;
const EXP_BIAS: i32 = 7;
const SIGN_MASK: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(transparent)]
pub struct Fp8Code(pub u8);

impl Fp8Code {
    pub const ZERO: Self = Self(0x00);
    pub const ONE: Self = Self(0x38);
    pub const MAX: Self = Self(0x7E);
    pub const NAN: Self = Self(0x7F);

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F == 0x7F
    }

    pub fn to_f32(self) -> f32 {
        decode_e4m3(self)
    }
}

/// Exact value of an E4M3 code.
pub fn decode_e4m3(c: Fp8Code) -> f32 {
    if c.is_nan() {
        return f32::NAN;
    }
    let exp = ((c.0 >> 3) & 0x0F) as i32;
    let mant = (c.0 & 0x07) as f32;
    let magnitude =
        if exp == 0 { mant / 8.0 * 2f32.powi(1 - EXP_BIAS) } else { (1.0 + mant / 8.0) * 2f32.powi(exp - EXP_BIAS) };
    if c.0 & SIGN_MASK != 0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Non-negative finite values, indexed by code `0x00..=0x7E`, strictly increasing.
fn positive_values() -> &'static [f64; 127] {
    static TABLE: OnceLock<[f64; 127]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0f64; 127];
        for (code, v) in t.iter_mut().enumerate() {
            *v = decode_e4m3(Fp8Code(code as u8)) as f64;
        }
        t
    })
}

/// Nearest finite E4M3 code, ties to even mantissa, saturating at ±448.
pub fn encode_e4m3(x: f32) -> Fp8Code {
    if x.is_nan() {
        return Fp8Code::NAN;
    }
    let sign = if x.is_sign_negative() { SIGN_MASK } else { 0 };
    let a = x.abs() as f64;
    let table = positive_values();
    if a >= E4M3_MAX as f64 {
        return Fp8Code(sign | Fp8Code::MAX.0);
    }
    // First code whose value is >= a; a < 448 so hi <= 126.
    let hi = table.partition_point(|&v| v < a);
    let code = if table[hi] == a || hi == 0 {
        hi
    } else {
        let lo = hi - 1;
        // Midpoints of neighbouring E4M3 values are exact in f64.
        let mid = (table[lo] + table[hi]) / 2.0;
        if a < mid {
            lo
        } else if a > mid {
            hi
        } else if lo % 2 == 0 {
            lo
        } else {
            hi
        }
    };
    Fp8Code(sign | code as u8)
}

/// Round-trip a single value through E4M3.
pub fn round_e4m3(x: f32) -> f32 {
    decode_e4m3(encode_e4m3(x))
}

/// Quantize-dequantize: `decode(encode(v / scale)) * scale` elementwise.
pub fn qdq_tensor(t: &Tensor, scale: f32) -> Result<Tensor> {
    check_scale(scale)?;
    Ok(t.map(|v| round_e4m3(v / scale) * scale))
}

pub(crate) fn qdq_slice_into(src: &[f32], scale: f32, dst: &mut Vec<f32>) {
    dst.clear();
    dst.extend(src.iter().map(|&v| round_e4m3(v / scale) * scale));
}

pub(crate) fn check_scale(scale: f32) -> Result<()> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("scale {scale} must be positive and finite")));
    }
    Ok(())
}

/// Per-tensor abs-max scale (`max|t| / 448`); all-zero tensors get scale 1.
pub fn absmax_scale(t: &[f32]) -> f32 {
    let m = t.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m / E4M3_MAX
    } else {
        1.0
    }
}

/// All 256 codes as CSV lines `code,value`, with a header row.
pub fn decode_table_csv() -> String {
    let mut out = String::from("code,value\n");
    for code in 0..=255u8 {
        let _ = writeln!(out, "0x{code:02X},{}", decode_e4m3(Fp8Code(code)));
    }
    out
}
