//! LSB-first bit packing for fixed-width codes.
//!
//! Code `i` of width `w` occupies bits `[i*w, (i+1)*w)` of the stream, where
//! bit `k` is bit `k % 8` of byte `k / 8`. The stream is padded with zero bits
//! to a whole byte once, at the end.

/// Bytes needed for `bits` bits.
pub fn bytes_for_bits(bits: u64) -> u64 {
    bits.div_ceil(8)
}

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_bits(bits: u64) -> Self {
        Self { bytes: Vec::with_capacity(bytes_for_bits(bits) as usize), bit_len: 0 }
    }

    /// Append the low `width` bits of `value` (`width <= 32`).
    pub fn push(&mut self, value: u32, width: u32) {
        debug_assert!(width <= 32);
        debug_assert!(width == 32 || value >> width == 0, "value {value} wider than {width} bits");
        let mut remaining = width;
        let mut v = value as u64;
        while remaining > 0 {
            let offset = (self.bit_len % 8) as u32;
            if offset == 0 {
                self.bytes.push(0);
            }
            let take = remaining.min(8 - offset);
            let chunk = (v & ((1u64 << take) - 1)) as u8;
            *self.bytes.last_mut().unwrap() |= chunk << offset;
            v >>= take;
            remaining -= take;
            self.bit_len += take as u64;
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// Read `width` bits (`width <= 25`) starting at `bit_offset`.
///
/// Bits past the end of `bytes` read as zero.
#[inline]
pub fn read_bits(bytes: &[u8], bit_offset: u64, width: u32) -> u32 {
    debug_assert!(width <= 25);
    let start = (bit_offset / 8) as usize;
    let shift = (bit_offset % 8) as u32;
    let mut window = [0u8; 4];
    let avail = bytes.len().saturating_sub(start).min(4);
    window[..avail].copy_from_slice(&bytes[start..start + avail]);
    (u32::from_le_bytes(window) >> shift) & ((1u32 << width) - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lsb_first_layout() {
        let mut w = BitWriter::new();
        w.push(0b10101, 5);
        w.push(0b00011, 5);
        assert_eq!(w.bit_len(), 10);
        // byte0 = bits 0..8: 10101 then low 3 bits of 00011 -> 011
        // byte1 = remaining 2 bits of 00011 -> 00
        assert_eq!(w.finish(), vec![0b0111_0101, 0b0000_0000]);
    }

    #[test]
    fn read_past_end_is_zero() {
        assert_eq!(read_bits(&[0xFF], 6, 5), 0b11);
        assert_eq!(read_bits(&[], 0, 5), 0);
    }

    proptest! {
        #[test]
        fn write_then_read(widths in proptest::collection::vec(1u32..=25, 1..64), seed in any::<u64>()) {
            let mut s = seed;
            let values: Vec<u32> = widths.iter().map(|&w| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 20) as u32) & ((1u32 << w) - 1)
            }).collect();
            let mut writer = BitWriter::new();
            for (&v, &w) in values.iter().zip(&widths) {
                writer.push(v, w);
            }
            let total: u64 = widths.iter().map(|&w| w as u64).sum();
            prop_assert_eq!(writer.bit_len(), total);
            let bytes = writer.finish();
            prop_assert_eq!(bytes.len() as u64, bytes_for_bits(total));
            let mut off = 0u64;
            for (&v, &w) in values.iter().zip(&widths) {
                prop_assert_eq!(read_bits(&bytes, off, w), v);
                off += w as u64;
            }
        }
    }
}
